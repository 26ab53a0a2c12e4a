//! Knowledge enhancement layers.
//!
//! Clauses are grounded once per directed edge. Unary predicates are
//! binarized into per-edge X/Y columns so unary and binary literals share
//! rows; a clause enhancer computes a weighted row-wise softmax over the
//! literal preactivations of every grounding at once, and a group-by
//! scatter folds the per-edge adjustments back onto the (node, class)
//! preactivation they refer to. Stacked layers own independent weights.
//!
//! Sign convention: a negated literal reads a negated preactivation and
//! receives a negated delta, so every literal's truth — and with it the
//! Gödel t-conorm of the clause — increases with the boost. The
//! `Verbatim` mode drops both sign applications for comparison runs.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::logic::{Clause, PredicateSchema, Sign, Var, WeightSpec};
use crate::nn::ParamStore;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Matrix, TensorError};

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("grounding error in clause `{clause}`: literal `{literal}`: {message}")]
    Grounding { clause: String, literal: String, message: String },
    #[error("knowledge config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A column of the edge-indexed grounding matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableColumn {
    /// Binarized unary predicate of `class` on the edge source.
    UnaryX(usize),
    /// Binarized unary predicate of `class` on the edge target.
    UnaryY(usize),
    /// The link predicate column, carrying a fixed preactivation.
    Binary,
}

/// Edge-indexed layout of binarized predicate columns. Built once per graph
/// and reused across epochs; per-epoch edge dropping selects a row subset.
#[derive(Clone, Debug)]
pub struct GroundingTable {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub binary_preactivation: f64,
    pub edges: Arc<Vec<(usize, usize)>>,
}

pub fn build_grounding_table(
    edges: Vec<(usize, usize)>,
    num_nodes: usize,
    num_classes: usize,
    binary_preactivation: f64,
) -> GroundingTable {
    GroundingTable { num_nodes, num_classes, binary_preactivation, edges: Arc::new(edges) }
}

impl GroundingTable {
    pub fn num_rows(&self) -> usize {
        self.edges.len()
    }

    /// Column layout: [C0^X, C0^Y, C1^X, C1^Y, ..., Link].
    pub fn columns(&self) -> Vec<TableColumn> {
        let mut cols = Vec::with_capacity(2 * self.num_classes + 1);
        for c in 0..self.num_classes {
            cols.push(TableColumn::UnaryX(c));
            cols.push(TableColumn::UnaryY(c));
        }
        cols.push(TableColumn::Binary);
        cols
    }

    /// The (node, class) cell a binarized column of `row` maps back to;
    /// `None` for the binary column, whose deltas are discarded.
    pub fn group_by_target(&self, row: usize, column: TableColumn) -> Option<(usize, usize)> {
        let (src, dst) = self.edges[row];
        match column {
            TableColumn::UnaryX(c) => Some((src, c)),
            TableColumn::UnaryY(c) => Some((dst, c)),
            TableColumn::Binary => None,
        }
    }
}

/// The edge rows active in one epoch (after edge dropping).
#[derive(Clone, Debug)]
pub struct KnowledgeContext {
    pub src: Arc<Vec<usize>>,
    pub dst: Arc<Vec<usize>>,
}

impl KnowledgeContext {
    /// `kept`: indices into the table's edge list, or `None` for all rows.
    pub fn new(table: &GroundingTable, kept: Option<&[usize]>) -> Self {
        let collect = |pick: &dyn Fn(&(usize, usize)) -> usize| -> Vec<usize> {
            match kept {
                Some(rows) => rows.iter().map(|&r| pick(&table.edges[r])).collect(),
                None => table.edges.iter().map(pick).collect(),
            }
        };
        KnowledgeContext {
            src: Arc::new(collect(&|e| e.0)),
            dst: Arc::new(collect(&|e| e.1)),
        }
    }

    pub fn rows(&self) -> usize {
        self.src.len()
    }
}

/// Whether negated literals negate preactivations and deltas (the
/// satisfaction-increasing reading) or are passed through unsigned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignMode {
    Signed,
    Verbatim,
}

/// A clause with literals resolved to grounding-table columns.
#[derive(Clone, Debug)]
pub struct ResolvedClause {
    pub literals: Vec<ResolvedLiteral>,
    pub weight: WeightSpec,
    pub text: String,
}

#[derive(Clone, Copy, Debug)]
pub struct ResolvedLiteral {
    pub sign: f64,
    pub column: TableColumn,
}

/// Maps each literal to its table column. Unary literals on `x` resolve to
/// the X column of their class, on `y` to the Y column; the binary
/// predicate resolves to the link column.
pub fn resolve_clauses(
    clauses: &[Clause],
    schema: &PredicateSchema,
) -> Result<Vec<ResolvedClause>, KnowledgeError> {
    clauses
        .iter()
        .map(|clause| {
            let text = crate::logic::render_clause(clause);
            let mut literals = Vec::with_capacity(clause.literals.len());
            for lit in &clause.literals {
                let fail = |message: String| KnowledgeError::Grounding {
                    clause: text.clone(),
                    literal: format!("{}{}", if lit.sign == Sign::Negated { "n" } else { "" }, lit.predicate),
                    message,
                };
                let column = if lit.predicate == schema.binary_name() {
                    if lit.vars != [Var::X, Var::Y] {
                        return Err(fail("binary literal must ground over (x,y)".into()));
                    }
                    TableColumn::Binary
                } else if let Some(class) = schema.unary_index(&lit.predicate) {
                    match lit.vars.as_slice() {
                        [Var::X] => TableColumn::UnaryX(class),
                        [Var::Y] => TableColumn::UnaryY(class),
                        _ => return Err(fail("unary literal must ground over x or y".into())),
                    }
                } else {
                    return Err(fail(format!("predicate `{}` is not in the schema", lit.predicate)));
                };
                literals.push(ResolvedLiteral {
                    sign: match lit.sign {
                        Sign::Positive => 1.0,
                        Sign::Negated => -1.0,
                    },
                    column,
                });
            }
            Ok(ResolvedClause { literals, weight: clause.weight, text })
        })
        .collect()
}

/// How learnable clause weights are initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClauseWeightInit {
    Constant(f64),
    RandomUniform,
}

#[derive(Clone, Copy, Debug)]
pub enum WeightBinding {
    Learnable { slot: usize },
    Fixed(f64),
}

/// Per-layer, per-clause weights. Learnable weights live in the parameter
/// store (one 1x1 matrix each) and are clamped to `[w_min, w_max]` after
/// every optimizer step; fixed weights never change.
#[derive(Clone, Debug)]
pub struct ClauseWeights {
    pub w_min: f64,
    pub w_max: f64,
    layers: Vec<Vec<WeightBinding>>,
}

impl ClauseWeights {
    pub fn build(
        clauses: &[ResolvedClause],
        ke_layers: usize,
        init: ClauseWeightInit,
        w_min: f64,
        w_max: f64,
        rng: &mut ChaCha8Rng,
        store: &mut ParamStore,
    ) -> Result<Self, KnowledgeError> {
        if w_min > w_max {
            return Err(KnowledgeError::Config(format!("clause weight bounds [{w_min}, {w_max}] are inverted")));
        }
        let mut layers = Vec::with_capacity(ke_layers);
        for layer in 0..ke_layers {
            let mut bindings = Vec::with_capacity(clauses.len());
            for (ci, clause) in clauses.iter().enumerate() {
                let binding = match clause.weight {
                    WeightSpec::Fixed(v) => WeightBinding::Fixed(v),
                    WeightSpec::Learnable => {
                        let value = match init {
                            ClauseWeightInit::Constant(v) => v,
                            ClauseWeightInit::RandomUniform => rng.random::<f64>(),
                        };
                        let slot = store.push(
                            format!("ke.layer{layer}.clause{ci}"),
                            Matrix::scalar(value),
                            true,
                        );
                        WeightBinding::Learnable { slot }
                    }
                };
                bindings.push(binding);
            }
            layers.push(bindings);
        }
        Ok(ClauseWeights { w_min, w_max, layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &[WeightBinding] {
        &self.layers[l]
    }

    /// Clamp learnable weights into `[w_min, w_max]`; fixed weights untouched.
    pub fn clip(&self, store: &mut ParamStore) {
        for layer in &self.layers {
            for binding in layer {
                if let WeightBinding::Learnable { slot } = binding {
                    let v = store.get(*slot).get(0, 0).clamp(self.w_min, self.w_max);
                    store.set(*slot, Matrix::scalar(v));
                }
            }
        }
    }

    /// Current weight values, per layer per clause.
    pub fn values(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|b| match b {
                        WeightBinding::Learnable { slot } => store.get(*slot).get(0, 0),
                        WeightBinding::Fixed(v) => *v,
                    })
                    .collect()
            })
            .collect()
    }
}

/// Materialised per-layer view of the grounding columns on the tape:
/// gathered source/target preactivations plus the constant link column.
pub struct TableView {
    pub zx: NodeId,
    pub zy: NodeId,
    pub bin: NodeId,
}

impl TableView {
    pub fn build(
        tape: &mut Tape,
        z: NodeId,
        table: &GroundingTable,
        ctx: &KnowledgeContext,
    ) -> Result<TableView, TensorError> {
        let zx = tape.gather_rows(z, Arc::clone(&ctx.src))?;
        let zy = tape.gather_rows(z, Arc::clone(&ctx.dst))?;
        let bin = tape.constant(Matrix::filled(ctx.rows(), 1, table.binary_preactivation));
        Ok(TableView { zx, zy, bin })
    }
}

fn literal_column(
    tape: &mut Tape,
    view: &TableView,
    lit: &ResolvedLiteral,
) -> Result<NodeId, TensorError> {
    match lit.column {
        TableColumn::UnaryX(c) => tape.select_columns(view.zx, Arc::new(vec![c])),
        TableColumn::UnaryY(c) => tape.select_columns(view.zy, Arc::new(vec![c])),
        TableColumn::Binary => Ok(view.bin),
    }
}

/// Per-row, per-literal preactivation deltas of one clause enhancer:
/// `delta_j = sign_j * w * softmax(sign .* z)_j` over all groundings.
pub fn clause_boost(
    tape: &mut Tape,
    clause: &ResolvedClause,
    view: &TableView,
    weight: NodeId,
    mode: SignMode,
) -> Result<NodeId, KnowledgeError> {
    let mut cols = Vec::with_capacity(clause.literals.len());
    for lit in &clause.literals {
        let raw = literal_column(tape, view, lit)?;
        let signed = if mode == SignMode::Signed && lit.sign < 0.0 {
            tape.scale(raw, -1.0)
        } else {
            raw
        };
        cols.push(signed);
    }
    let u = tape.concat_cols(&cols)?;
    let sm = tape.row_softmax(u)?;
    let weighted = tape.mul(sm, weight)?;
    let deltas = if mode == SignMode::Signed {
        let signs = Matrix::from_vec(
            1,
            clause.literals.len(),
            clause.literals.iter().map(|l| l.sign).collect(),
        );
        let sign_row = tape.constant(signs);
        tape.mul(weighted, sign_row)?
    } else {
        weighted
    };
    Ok(deltas)
}

/// Sums the per-grounding deltas into the (node, class) cells they refer
/// to. Binary-column deltas participate in the softmax but are dropped
/// here: the link preactivation is a fixed constant, not a prediction.
pub fn group_by_scatter(
    tape: &mut Tape,
    deltas: NodeId,
    clause: &ResolvedClause,
    ctx: &KnowledgeContext,
    num_nodes: usize,
    num_classes: usize,
) -> Result<NodeId, KnowledgeError> {
    let mut acc: Option<NodeId> = None;
    for (j, lit) in clause.literals.iter().enumerate() {
        let (index, class) = match lit.column {
            TableColumn::UnaryX(c) => (Arc::clone(&ctx.src), c),
            TableColumn::UnaryY(c) => (Arc::clone(&ctx.dst), c),
            TableColumn::Binary => continue,
        };
        let dcol = tape.select_columns(deltas, Arc::new(vec![j]))?;
        let per_node = tape.scatter_add_rows(dcol, index, num_nodes)?;
        let embed = tape.constant(Matrix::one_hot_row(num_classes, class));
        let cell = tape.matmul(per_node, embed)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, cell)?,
            None => cell,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => tape.constant(Matrix::zeros(num_nodes, num_classes)),
    })
}

/// One knowledge enhancement layer: `z' = z + sum_c group_by(boost_c(z))`.
pub fn ke_layer_forward(
    tape: &mut Tape,
    z: NodeId,
    table: &GroundingTable,
    ctx: &KnowledgeContext,
    clauses: &[ResolvedClause],
    bindings: &[WeightBinding],
    store: &ParamStore,
    mode: SignMode,
) -> Result<NodeId, KnowledgeError> {
    if ctx.rows() == 0 || clauses.is_empty() {
        return Ok(z);
    }
    let view = TableView::build(tape, z, table, ctx)?;

    let mut total: Option<NodeId> = None;
    for (clause, binding) in clauses.iter().zip(bindings) {
        let weight = match binding {
            WeightBinding::Learnable { slot } => tape.param(*slot, store.get(*slot)),
            WeightBinding::Fixed(v) => tape.constant(Matrix::scalar(*v)),
        };
        let deltas = clause_boost(tape, clause, &view, weight, mode)?;
        let cell = group_by_scatter(tape, deltas, clause, ctx, table.num_nodes, table.num_classes)?;
        total = Some(match total {
            Some(t) => tape.add(t, cell)?,
            None => cell,
        });
    }
    match total {
        Some(t) => Ok(tape.add(z, t)?),
        None => Ok(z),
    }
}

/// Stacked knowledge layers with independent per-layer clause weights.
#[allow(clippy::too_many_arguments)]
pub fn stack_forward(
    tape: &mut Tape,
    z0: NodeId,
    table: &GroundingTable,
    ctx: &KnowledgeContext,
    clauses: &[ResolvedClause],
    weights: &ClauseWeights,
    store: &ParamStore,
    mode: SignMode,
) -> Result<NodeId, KnowledgeError> {
    let mut z = z0;
    for layer in 0..weights.num_layers() {
        z = ke_layer_forward(tape, z, table, ctx, clauses, weights.layer(layer), store, mode)?;
    }
    Ok(z)
}
