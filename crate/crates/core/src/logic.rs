//! Clause language: lexing, parsing, validation, rendering.
//!
//! Surface syntax, one clause per line:
//!
//! ```text
//! # comment
//! _:nC0(x),nLink(x,y),C0(y)
//! 2.5:C1(x)
//! ```
//!
//! The weight prefix is `_` for a learnable clause weight (initialised from
//! the training config) or a real literal for a fixed weight. A lowercase
//! `n` negates the literal that follows; predicate names start with an
//! uppercase letter, so the marker is unambiguous. Variables are restricted
//! to `x` and `y` — clauses are grounded over edge-connected node pairs and
//! have no defined grounding beyond two variables.

use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

/// Position-carrying parse error.
#[derive(Debug, Error)]
#[error("clause parse error at line {line}, column {column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Error)]
#[error("clause {clause}: {message}")]
pub struct ValidationError {
    pub clause: usize,
    pub message: String,
}

/// Non-fatal validation finding.
#[derive(Debug, Clone)]
pub struct ValidationWarning {
    pub clause: usize,
    pub message: String,
}

/// Unary predicate names (one per class, in label order) plus the single
/// binary link predicate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredicateSchema {
    unary: Vec<String>,
    binary: String,
}

impl PredicateSchema {
    pub fn new(unary: Vec<String>, binary: String) -> Result<Self, ValidationError> {
        let mut seen = HashSet::new();
        for name in unary.iter().chain(std::iter::once(&binary)) {
            if !name.chars().next().is_some_and(|c| c.is_ascii_uppercase()) {
                return Err(ValidationError {
                    clause: 0,
                    message: format!("predicate name `{name}` must start with an uppercase letter"),
                });
            }
            if !seen.insert(name.clone()) {
                return Err(ValidationError {
                    clause: 0,
                    message: format!("duplicate predicate name `{name}`"),
                });
            }
        }
        if unary.is_empty() {
            return Err(ValidationError { clause: 0, message: "schema needs at least one unary predicate".into() });
        }
        Ok(PredicateSchema { unary, binary })
    }

    /// Default schema for `m` classes: `C0..C{m-1}` plus `Link`.
    pub fn for_classes(m: usize) -> Self {
        PredicateSchema {
            unary: (0..m).map(|i| format!("C{i}")).collect(),
            binary: "Link".to_string(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.unary.len()
    }

    pub fn unary_names(&self) -> &[String] {
        &self.unary
    }

    pub fn binary_name(&self) -> &str {
        &self.binary
    }

    pub fn unary_index(&self, name: &str) -> Option<usize> {
        self.unary.iter().position(|u| u == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sign {
    Positive,
    Negated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Var {
    X,
    Y,
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Var::X => "x",
            Var::Y => "y",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Literal {
    pub sign: Sign,
    pub predicate: String,
    pub vars: Vec<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightSpec {
    /// Weight is a trainable parameter, initialised from the run config.
    Learnable,
    /// Weight is pinned and never updated.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clause {
    pub literals: Vec<Literal>,
    pub weight: WeightSpec,
}

// ── parsing ──────────────────────────────────────────────────────────

fn parse_literal(line_no: usize, text: &str, start_col: usize) -> Result<Literal, ParseError> {
    let err = |offset: usize, message: String| ParseError {
        line: line_no,
        column: start_col + offset,
        message,
    };
    let chars: Vec<char> = text.chars().collect();
    let mut pos = 0;
    while pos < chars.len() && chars[pos].is_whitespace() {
        pos += 1;
    }
    let mut sign = Sign::Positive;
    if pos < chars.len() && chars[pos] == 'n' {
        sign = Sign::Negated;
        pos += 1;
    }
    let name_start = pos;
    if pos >= chars.len() || !chars[pos].is_ascii_uppercase() {
        return Err(err(pos, "expected a predicate name starting with an uppercase letter".into()));
    }
    while pos < chars.len() && (chars[pos].is_ascii_alphanumeric() || chars[pos] == '_') {
        pos += 1;
    }
    let predicate: String = chars[name_start..pos].iter().collect();
    if pos >= chars.len() || chars[pos] != '(' {
        return Err(err(pos, format!("expected `(` after predicate `{predicate}`")));
    }
    pos += 1;
    let mut vars = Vec::new();
    loop {
        while pos < chars.len() && chars[pos].is_whitespace() {
            pos += 1;
        }
        match chars.get(pos) {
            Some('x') => vars.push(Var::X),
            Some('y') => vars.push(Var::Y),
            Some(c) => return Err(err(pos, format!("expected variable `x` or `y`, found `{c}`"))),
            None => return Err(err(pos, "unterminated variable list".into())),
        }
        pos += 1;
        while pos < chars.len() && chars[pos].is_whitespace() {
            pos += 1;
        }
        match chars.get(pos) {
            Some(',') => {
                pos += 1;
                if vars.len() == 2 {
                    return Err(err(pos, "predicates take at most two variables".into()));
                }
            }
            Some(')') => {
                pos += 1;
                break;
            }
            Some(c) => return Err(err(pos, format!("expected `,` or `)`, found `{c}`"))),
            None => return Err(err(pos, "unterminated variable list".into())),
        }
    }
    while pos < chars.len() && chars[pos].is_whitespace() {
        pos += 1;
    }
    if pos != chars.len() {
        return Err(err(pos, format!("unexpected trailing `{}`", chars[pos])));
    }
    Ok(Literal { sign, predicate, vars })
}

/// Splits a literal list on commas that are not inside parentheses,
/// yielding (char offset, slice) pairs.
fn split_literals(text: &str) -> Vec<(usize, &str)> {
    let mut parts = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    for (i, c) in text.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                parts.push((start, &text[start..i]));
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push((start, &text[start..]));
    parts
}

/// Parses a clause file body: one clause per non-comment line, literal
/// order preserved.
pub fn parse_clauses(text: &str) -> Result<Vec<Clause>, ParseError> {
    let mut clauses = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (weight_str, body) = raw_line.split_once(':').ok_or(ParseError {
            line: line_no,
            column: 1,
            message: "expected `WEIGHT:literals` with a `:` separator".into(),
        })?;
        let weight = match weight_str.trim() {
            "_" => WeightSpec::Learnable,
            w => WeightSpec::Fixed(w.parse::<f64>().map_err(|_| ParseError {
                line: line_no,
                column: 1,
                message: format!("weight must be `_` or a real number, found `{w}`"),
            })?),
        };
        if body.trim().is_empty() {
            return Err(ParseError { line: line_no, column: weight_str.chars().count() + 2, message: "empty clause".into() });
        }
        let body_offset = weight_str.chars().count() + 1; // past the `:`
        let mut literals = Vec::new();
        let mut seen = HashSet::new();
        for (offset, chunk) in split_literals(body) {
            let col = body_offset + offset + 1;
            if chunk.trim().is_empty() {
                return Err(ParseError { line: line_no, column: col, message: "empty literal".into() });
            }
            let lit = parse_literal(line_no, chunk, col)?;
            if !seen.insert(lit.clone()) {
                return Err(ParseError {
                    line: line_no,
                    column: col,
                    message: format!("duplicate literal `{}`", render_literal(&lit)),
                });
            }
            literals.push(lit);
        }
        clauses.push(Clause { literals, weight });
    }
    Ok(clauses)
}

fn render_literal(lit: &Literal) -> String {
    let mut out = String::new();
    if lit.sign == Sign::Negated {
        out.push('n');
    }
    out.push_str(&lit.predicate);
    out.push('(');
    for (i, v) in lit.vars.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&v.to_string());
    }
    out.push(')');
    out
}

/// Renders a clause back to its line form; `parse_clauses` on the result
/// yields an equal clause.
pub fn render_clause(clause: &Clause) -> String {
    let weight = match clause.weight {
        WeightSpec::Learnable => "_".to_string(),
        WeightSpec::Fixed(w) => format!("{w}"),
    };
    let body: Vec<String> = clause.literals.iter().map(render_literal).collect();
    format!("{weight}:{}", body.join(","))
}

/// Checks clauses against a schema. Errors are fatal (unknown predicate,
/// arity misuse, wrong binary variable pair); warnings flag clauses with no
/// unary literal, which cannot affect any prediction.
pub fn validate(
    clauses: &[Clause],
    schema: &PredicateSchema,
) -> Result<Vec<ValidationWarning>, Vec<ValidationError>> {
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    for (ci, clause) in clauses.iter().enumerate() {
        let mut has_unary = false;
        for lit in &clause.literals {
            let rendered = render_literal(lit);
            if lit.predicate == schema.binary_name() {
                if lit.vars.len() != 2 {
                    errors.push(ValidationError {
                        clause: ci,
                        message: format!("binary predicate used with {} variable(s) in `{rendered}`", lit.vars.len()),
                    });
                } else if lit.vars != [Var::X, Var::Y] {
                    errors.push(ValidationError {
                        clause: ci,
                        message: format!("binary literal `{rendered}` must use the variable pair (x,y)"),
                    });
                }
            } else if schema.unary_index(&lit.predicate).is_some() {
                has_unary = true;
                if lit.vars.len() != 1 {
                    errors.push(ValidationError {
                        clause: ci,
                        message: format!("unary predicate used with {} variables in `{rendered}`", lit.vars.len()),
                    });
                }
            } else {
                errors.push(ValidationError {
                    clause: ci,
                    message: format!("unknown predicate `{}` in `{rendered}`", lit.predicate),
                });
            }
        }
        if !has_unary && !clause.literals.iter().any(|l| schema.unary_index(&l.predicate).is_some()) {
            warnings.push(ValidationWarning {
                clause: ci,
                message: "clause has no unary literal and produces no learnable effect".into(),
            });
        }
    }
    if errors.is_empty() {
        Ok(warnings)
    } else {
        Err(errors)
    }
}

/// One learnable clause per class: `nC(x),nLink(x,y),C(y)` — a linked
/// neighbour of a class-k node is also class k.
pub fn instantiate_class_template(schema: &PredicateSchema) -> Vec<Clause> {
    schema
        .unary_names()
        .iter()
        .map(|class_name| Clause {
            literals: vec![
                Literal { sign: Sign::Negated, predicate: class_name.clone(), vars: vec![Var::X] },
                Literal {
                    sign: Sign::Negated,
                    predicate: schema.binary_name().to_string(),
                    vars: vec![Var::X, Var::Y],
                },
                Literal { sign: Sign::Positive, predicate: class_name.clone(), vars: vec![Var::Y] },
            ],
            weight: WeightSpec::Learnable,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_the_citation_homophily_clause() {
        let clauses = parse_clauses("_:nAI(x),nCite(x,y),AI(y)\n").unwrap();
        assert_eq!(clauses.len(), 1);
        let c = &clauses[0];
        assert_eq!(c.weight, WeightSpec::Learnable);
        assert_eq!(
            c.literals,
            vec![
                Literal { sign: Sign::Negated, predicate: "AI".into(), vars: vec![Var::X] },
                Literal { sign: Sign::Negated, predicate: "Cite".into(), vars: vec![Var::X, Var::Y] },
                Literal { sign: Sign::Positive, predicate: "AI".into(), vars: vec![Var::Y] },
            ]
        );
    }

    #[test]
    fn parses_fixed_weight_single_literal() {
        let clauses = parse_clauses("2.5:A(x)").unwrap();
        assert_eq!(clauses[0].weight, WeightSpec::Fixed(2.5));
        assert_eq!(clauses[0].literals.len(), 1);
        assert_eq!(clauses[0].literals[0].sign, Sign::Positive);
    }

    #[test]
    fn skips_comments_and_blank_lines() {
        let text = "# homophily rules\n\n_:C0(x)\n  # indented comment\n_:C1(y)\n";
        let clauses = parse_clauses(text).unwrap();
        assert_eq!(clauses.len(), 2);
    }

    #[test]
    fn errors_carry_line_and_column() {
        let err = parse_clauses("_:C0(x)\n_:C1(z)").unwrap_err();
        assert_eq!(err.line, 2);
        assert!(err.column > 2, "column {}", err.column);
        assert!(err.message.contains("variable"));

        let err = parse_clauses("_:").unwrap_err();
        assert!(err.message.contains("empty clause"));

        let err = parse_clauses("oops:C0(x)").unwrap_err();
        assert!(err.message.contains("weight"));

        let err = parse_clauses("_:C0(x),C0(x)").unwrap_err();
        assert!(err.message.contains("duplicate"));

        let err = parse_clauses("_:Link(x,y,x)").unwrap_err();
        assert!(err.message.contains("at most two"));
    }

    #[test]
    fn render_parse_round_trip_on_template() {
        let schema = PredicateSchema::for_classes(4);
        for clause in instantiate_class_template(&schema) {
            let text = render_clause(&clause);
            let reparsed = parse_clauses(&text).unwrap();
            assert_eq!(reparsed, vec![clause]);
        }
    }

    #[test]
    fn validate_flags_unknown_predicates_and_arity() {
        let schema = PredicateSchema::for_classes(2);
        let clauses = parse_clauses("_:nC0(x),Mystery(y)\n_:C1(x,y)\n_:Link(x,x)\n_:nLink(x,y)").unwrap();
        let errors = validate(&clauses, &schema).unwrap_err();
        let joined: Vec<String> = errors.iter().map(|e| e.to_string()).collect();
        assert!(joined.iter().any(|e| e.starts_with("clause 0") && e.contains("Mystery")), "{joined:?}");
        assert!(joined.iter().any(|e| e.starts_with("clause 1") && e.contains("2 variables")), "{joined:?}");
        assert!(joined.iter().any(|e| e.starts_with("clause 2") && e.contains("(x,y)")), "{joined:?}");
    }

    #[test]
    fn validate_warns_on_clauses_without_unary_literals() {
        let schema = PredicateSchema::for_classes(2);
        let clauses = parse_clauses("_:nLink(x,y)").unwrap();
        let warnings = validate(&clauses, &schema).unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].message.contains("no unary literal"));
    }

    #[test]
    fn template_shape_matches_class_count() {
        for m in [1usize, 3, 7] {
            let schema = PredicateSchema::new(
                (0..m).map(|i| format!("K{i}")).collect(),
                "Cite".to_string(),
            )
            .unwrap();
            let clauses = instantiate_class_template(&schema);
            assert_eq!(clauses.len(), m);
            for c in &clauses {
                assert_eq!(c.literals.len(), 3);
                assert_eq!(
                    c.literals.iter().map(|l| l.sign).collect::<Vec<_>>(),
                    vec![Sign::Negated, Sign::Negated, Sign::Positive]
                );
                assert_eq!(c.weight, WeightSpec::Learnable);
            }
            assert!(validate(&clauses, &schema).is_ok());
        }
    }

    fn arb_literal() -> impl Strategy<Value = Literal> {
        (
            prop_oneof![Just(Sign::Positive), Just(Sign::Negated)],
            prop_oneof![
                Just(("P0".to_string(), 1usize)),
                Just(("P1".to_string(), 1usize)),
                Just(("Qq_2".to_string(), 1usize)),
                Just(("Rel".to_string(), 2usize)),
            ],
            prop_oneof![Just(Var::X), Just(Var::Y)],
        )
            .prop_map(|(sign, (predicate, arity), v)| Literal {
                sign,
                predicate,
                vars: if arity == 1 { vec![v] } else { vec![Var::X, Var::Y] },
            })
    }

    fn arb_clause() -> impl Strategy<Value = Clause> {
        (
            proptest::collection::vec(arb_literal(), 1..5),
            prop_oneof![
                Just(WeightSpec::Learnable),
                (0.0f64..10.0).prop_map(WeightSpec::Fixed),
            ],
        )
            .prop_map(|(mut literals, weight)| {
                let mut seen = HashSet::new();
                literals.retain(|l| seen.insert(l.clone()));
                Clause { literals, weight }
            })
    }

    proptest! {
        #[test]
        fn parse_render_identity(clause in arb_clause()) {
            let text = render_clause(&clause);
            let parsed = parse_clauses(&text).unwrap();
            prop_assert_eq!(parsed, vec![clause]);
        }
    }
}
