//! Real-valued interpretation of the clause language.
//!
//! Truth values live in [0,1]; disjunction is the Gödel t-conorm (max),
//! negation is `t -> 1-t`. Truth values are produced from preactivations via
//! the logistic, so a negated literal can equivalently be evaluated by
//! negating its preactivation: `sigma(-z) = 1 - sigma(z)` exactly.

use std::collections::HashMap;

use thiserror::Error;

use crate::logic::{Clause, Literal, Sign, Var};

#[derive(Debug, Error)]
pub enum FuzzyError {
    #[error("t-conorm over an empty truth vector")]
    EmptyTruthVector,
    #[error("truth value {0} outside [0,1]")]
    OutOfRange(f64),
    #[error("no truth value assigned to {0}")]
    MissingAtom(String),
}

/// Gödel t-conorm extended to a vector: the maximum.
pub fn godel_tconorm(truths: &[f64]) -> Result<f64, FuzzyError> {
    if truths.is_empty() {
        return Err(FuzzyError::EmptyTruthVector);
    }
    let mut max = f64::NEG_INFINITY;
    for &t in truths {
        if !(0.0..=1.0).contains(&t) {
            return Err(FuzzyError::OutOfRange(t));
        }
        max = max.max(t);
    }
    Ok(max)
}

/// Fuzzy negation `t -> 1 - t`; an involution.
pub fn fuzzy_not(t: f64) -> f64 {
    1.0 - t
}

/// Truth of a literal given the truth of its grounded predicate.
pub fn literal_truth(literal: &Literal, t_pred: f64) -> f64 {
    match literal.sign {
        Sign::Positive => t_pred,
        Sign::Negated => fuzzy_not(t_pred),
    }
}

/// Sign applied to a predicate preactivation so that
/// `sigma(sign * z) == literal_truth(lit, sigma(z))` exactly.
pub fn literal_preactivation_sign(literal: &Literal) -> f64 {
    match literal.sign {
        Sign::Positive => 1.0,
        Sign::Negated => -1.0,
    }
}

/// Truth values for the grounded predicate instances of one grounding,
/// keyed by (predicate, variable tuple).
#[derive(Clone, Debug, Default)]
pub struct TruthAssignment {
    map: HashMap<(String, Vec<Var>), f64>,
}

impl TruthAssignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, predicate: &str, vars: &[Var], truth: f64) {
        self.map.insert((predicate.to_string(), vars.to_vec()), truth);
    }

    pub fn get(&self, predicate: &str, vars: &[Var]) -> Option<f64> {
        self.map.get(&(predicate.to_string(), vars.to_vec())).copied()
    }
}

/// Gödel t-conorm over the literal truths of a clause.
pub fn clause_truth(clause: &Clause, assignment: &TruthAssignment) -> Result<f64, FuzzyError> {
    let mut truths = Vec::with_capacity(clause.literals.len());
    for lit in &clause.literals {
        let t_pred = assignment.get(&lit.predicate, &lit.vars).ok_or_else(|| {
            FuzzyError::MissingAtom(format!("{}({:?})", lit.predicate, lit.vars))
        })?;
        if !(0.0..=1.0).contains(&t_pred) {
            return Err(FuzzyError::OutOfRange(t_pred));
        }
        truths.push(literal_truth(lit, t_pred));
    }
    godel_tconorm(&truths)
}
