//! Base networks: MLP, GCN and GAT stacks producing per-node per-class
//! preactivations. No activation is applied to the output layer; truth
//! values and losses are derived downstream.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::edge_normalization;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Matrix, TensorError};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("model config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Mlp,
    Gcn,
    Gat,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Gcn => "gcn",
            ModelKind::Gat => "gat",
        }
    }

    pub fn parse(s: &str) -> Result<Self, NnError> {
        match s {
            "mlp" => Ok(ModelKind::Mlp),
            "gcn" => Ok(ModelKind::Gcn),
            "gat" => Ok(ModelKind::Gat),
            other => Err(NnError::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden_layers: usize,
    pub hidden_channels: usize,
    pub attention_heads: usize,
    pub dropout_rate: f64,
    pub use_batch_norm: bool,
    pub normalize_edges: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Mlp,
            hidden_layers: 2,
            hidden_channels: 32,
            attention_heads: 1,
            dropout_rate: 0.5,
            use_batch_norm: true,
            normalize_edges: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.hidden_layers < 1 {
            return Err(NnError::Config("hidden_layers must be >= 1".into()));
        }
        if self.hidden_channels < 1 {
            return Err(NnError::Config("hidden_channels must be >= 1".into()));
        }
        if self.attention_heads < 1 {
            return Err(NnError::Config("attention_heads must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NnError::Config(format!("dropout rate {} outside [0,1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Named parameter matrices, addressed by slot index. Batch-norm running
/// statistics live here too, flagged non-trainable.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Matrix,
    pub trainable: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> usize {
        self.entries.push(ParamEntry { name: name.into(), value, trainable });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Matrix {
        &self.entries[slot].value
    }

    pub fn set(&mut self, slot: usize, value: Matrix) {
        debug_assert_eq!(self.entries[slot].value.shape(), value.shape());
        self.entries[slot].value = value;
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn values(&self) -> Vec<Matrix> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn replace_values(&mut self, values: Vec<Matrix>) {
        assert_eq!(values.len(), self.entries.len());
        for (entry, value) in self.entries.iter_mut().zip(values) {
            debug_assert_eq!(entry.value.shape(), value.shape());
            entry.value = value;
        }
    }

    pub fn slot_by_name(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }
}

/// Message-passing plan for one epoch: the kept edges plus one self-loop
/// row per node. `to[r]` aggregates the message from `from[r]`.
#[derive(Clone, Debug)]
pub struct Propagation {
    pub n: usize,
    pub from: Arc<Vec<usize>>,
    pub to: Arc<Vec<usize>>,
    /// rows x 1 column of normalization coefficients (all ones when
    /// normalization is off).
    pub coeff: Arc<Matrix>,
}

impl Propagation {
    pub fn build(n: usize, edges: &[(usize, usize)], normalize: bool) -> Propagation {
        let rows = edges.len() + n;
        let mut from = Vec::with_capacity(rows);
        let mut to = Vec::with_capacity(rows);
        let mut coeff = Vec::with_capacity(rows);
        let norm = edge_normalization(n, edges);
        for (e, &(s, d)) in edges.iter().enumerate() {
            to.push(s);
            from.push(d);
            coeff.push(if normalize { norm.edge_coeff[e] } else { 1.0 });
        }
        for i in 0..n {
            to.push(i);
            from.push(i);
            coeff.push(if normalize { norm.self_coeff[i] } else { 1.0 });
        }
        Propagation {
            n,
            from: Arc::new(from),
            to: Arc::new(to),
            coeff: Arc::new(Matrix::from_vec(rows, 1, coeff)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
struct HeadSlots {
    weight: usize,
    att_to: usize,
    att_from: usize,
}

#[derive(Clone, Debug)]
enum MainLayer {
    Dense { weight: usize, bias: usize },
    Conv { weight: usize, bias: usize },
    Attention { heads: Vec<HeadSlots>, bias: usize, average: bool },
}

#[derive(Clone, Debug)]
struct BnSlots {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

#[derive(Clone, Debug)]
struct Block {
    main: MainLayer,
    bn: Option<BnSlots>,
}

/// A built network: layer descriptors referencing slots in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub input_dim: usize,
    pub output_dim: usize,
    blocks: Vec<Block>,
    output: MainLayer,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;
const ATTENTION_SLOPE: f64 = 0.2;

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect())
}

impl Model {
    /// Builds layer parameters into `store` with deterministic draws from
    /// `rng` (uniform Glorot scaling; zero biases).
    pub fn build(
        cfg: &ModelConfig,
        input_dim: usize,
        output_dim: usize,
        rng: &mut ChaCha8Rng,
        store: &mut ParamStore,
    ) -> Result<Model, NnError> {
        cfg.validate()?;
        if input_dim < 1 || output_dim < 1 {
            return Err(NnError::Config(format!("bad model dims {input_dim} -> {output_dim}")));
        }
        let h = cfg.hidden_channels;
        let heads = cfg.attention_heads;
        let mut blocks = Vec::with_capacity(cfg.hidden_layers);
        let mut in_dim = input_dim;
        for layer in 0..cfg.hidden_layers {
            let prefix = format!("layer{layer}");
            let (main, out_dim) = match cfg.kind {
                ModelKind::Mlp | ModelKind::Gcn => {
                    let weight = store.push(format!("{prefix}.weight"), glorot(rng, in_dim, h, in_dim, h), true);
                    let bias = store.push(format!("{prefix}.bias"), Matrix::zeros(1, h), true);
                    let main = if cfg.kind == ModelKind::Mlp {
                        MainLayer::Dense { weight, bias }
                    } else {
                        MainLayer::Conv { weight, bias }
                    };
                    (main, h)
                }
                ModelKind::Gat => {
                    let mut head_slots = Vec::with_capacity(heads);
                    for head in 0..heads {
                        let weight = store.push(
                            format!("{prefix}.head{head}.weight"),
                            glorot(rng, in_dim, h, in_dim, h),
                            true,
                        );
                        let att_to = store.push(
                            format!("{prefix}.head{head}.att_to"),
                            glorot(rng, h, 1, h, 1),
                            true,
                        );
                        let att_from = store.push(
                            format!("{prefix}.head{head}.att_from"),
                            glorot(rng, h, 1, h, 1),
                            true,
                        );
                        head_slots.push(HeadSlots { weight, att_to, att_from });
                    }
                    let bias = store.push(format!("{prefix}.bias"), Matrix::zeros(1, heads * h), true);
                    (MainLayer::Attention { heads: head_slots, bias, average: false }, heads * h)
                }
            };
            let bn = cfg.use_batch_norm.then(|| BnSlots {
                gamma: store.push(format!("bn{layer}.gamma"), Matrix::filled(1, out_dim, 1.0), true),
                beta: store.push(format!("bn{layer}.beta"), Matrix::zeros(1, out_dim), true),
                running_mean: store.push(format!("bn{layer}.running_mean"), Matrix::zeros(1, out_dim), false),
                running_var: store.push(format!("bn{layer}.running_var"), Matrix::filled(1, out_dim, 1.0), false),
            });
            blocks.push(Block { main, bn });
            in_dim = out_dim;
        }

        let output = match cfg.kind {
            ModelKind::Mlp => MainLayer::Dense {
                weight: store.push("out.weight", glorot(rng, in_dim, output_dim, in_dim, output_dim), true),
                bias: store.push("out.bias", Matrix::zeros(1, output_dim), true),
            },
            ModelKind::Gcn => MainLayer::Conv {
                weight: store.push("out.weight", glorot(rng, in_dim, output_dim, in_dim, output_dim), true),
                bias: store.push("out.bias", Matrix::zeros(1, output_dim), true),
            },
            ModelKind::Gat => {
                let mut head_slots = Vec::with_capacity(heads);
                for head in 0..heads {
                    let weight = store.push(
                        format!("out.head{head}.weight"),
                        glorot(rng, in_dim, output_dim, in_dim, output_dim),
                        true,
                    );
                    let att_to =
                        store.push(format!("out.head{head}.att_to"), glorot(rng, output_dim, 1, output_dim, 1), true);
                    let att_from = store.push(
                        format!("out.head{head}.att_from"),
                        glorot(rng, output_dim, 1, output_dim, 1),
                        true,
                    );
                    head_slots.push(HeadSlots { weight, att_to, att_from });
                }
                let bias = store.push("out.bias", Matrix::zeros(1, output_dim), true);
                MainLayer::Attention { heads: head_slots, bias, average: true }
            }
        };

        Ok(Model { cfg: cfg.clone(), input_dim, output_dim, blocks, output })
    }

    /// Forward pass to preactivations (n x output_dim, no final activation).
    ///
    /// `prop` is required for GCN/GAT. In train mode, dropout draws come
    /// from `rng` and batch-norm running statistics in `store` are updated.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
        prop: Option<&Propagation>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        store: &mut ParamStore,
    ) -> Result<NodeId, NnError> {
        if self.cfg.kind != ModelKind::Mlp && prop.is_none() {
            return Err(NnError::Config("graph models need a propagation plan".into()));
        }
        let mut h = x;
        for block in &self.blocks {
            h = self.main_forward(tape, h, &block.main, prop, mode, rng, store)?;
            if let Some(bn) = &block.bn {
                h = self.batch_norm(tape, h, bn, mode, store)?;
            }
            h = tape.relu(h);
            h = self.dropout(tape, h, mode, rng)?;
        }
        let z = self.main_forward(tape, h, &self.output, prop, mode, rng, store)?;
        Ok(z)
    }

    fn dropout(
        &self,
        tape: &mut Tape,
        h: NodeId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, NnError> {
        let p = self.cfg.dropout_rate;
        if mode == Mode::Eval || p == 0.0 {
            return Ok(h);
        }
        let (rows, cols) = tape.value(h).shape();
        let keep = 1.0 / (1.0 - p);
        let mask = Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| if rng.random::<f64>() >= p { keep } else { 0.0 }).collect(),
        );
        let m = tape.constant(mask);
        Ok(tape.mul(h, m)?)
    }

    fn main_forward(
        &self,
        tape: &mut Tape,
        h: NodeId,
        layer: &MainLayer,
        prop: Option<&Propagation>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        store: &mut ParamStore,
    ) -> Result<NodeId, NnError> {
        match layer {
            MainLayer::Dense { weight, bias } => {
                let w = tape.param(*weight, store.get(*weight));
                let b = tape.param(*bias, store.get(*bias));
                let hw = tape.matmul(h, w)?;
                Ok(tape.add(hw, b)?)
            }
            MainLayer::Conv { weight, bias } => {
                let prop = prop.expect("checked in forward");
                let w = tape.param(*weight, store.get(*weight));
                let b = tape.param(*bias, store.get(*bias));
                let hw = tape.matmul(h, w)?;
                let msgs = tape.gather_rows(hw, Arc::clone(&prop.from))?;
                let coeff = tape.constant_shared(Arc::clone(&prop.coeff));
                let weighted = tape.mul(msgs, coeff)?;
                let agg = tape.scatter_add_rows(weighted, Arc::clone(&prop.to), prop.n)?;
                Ok(tape.add(agg, b)?)
            }
            MainLayer::Attention { heads, bias, average } => {
                let prop = prop.expect("checked in forward");
                let mut outs = Vec::with_capacity(heads.len());
                for slots in heads {
                    outs.push(self.attention_head(tape, h, slots, prop, !average, mode, rng, store)?);
                }
                let combined = if *average {
                    let mut acc = outs[0];
                    for &o in &outs[1..] {
                        acc = tape.add(acc, o)?;
                    }
                    tape.scale(acc, 1.0 / heads.len() as f64)
                } else {
                    tape.concat_cols(&outs)?
                };
                let b = tape.param(*bias, store.get(*bias));
                Ok(tape.add(combined, b)?)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_head(
        &self,
        tape: &mut Tape,
        h: NodeId,
        slots: &HeadSlots,
        prop: &Propagation,
        hidden: bool,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        store: &mut ParamStore,
    ) -> Result<NodeId, NnError> {
        let w = tape.param(slots.weight, store.get(slots.weight));
        let a_to = tape.param(slots.att_to, store.get(slots.att_to));
        let a_from = tape.param(slots.att_from, store.get(slots.att_from));
        let wh = tape.matmul(h, w)?;
        let s_to = tape.matmul(wh, a_to)?;
        let s_from = tape.matmul(wh, a_from)?;
        let to_scores = tape.gather_rows(s_to, Arc::clone(&prop.to))?;
        let from_scores = tape.gather_rows(s_from, Arc::clone(&prop.from))?;
        let raw = tape.add(to_scores, from_scores)?;
        let scores = tape.leaky_relu(raw, ATTENTION_SLOPE);

        // per-aggregator max, detached: subtracting a constant leaves the
        // softmax and its gradient unchanged
        let values = tape.value(scores);
        let mut seg_max = vec![f64::NEG_INFINITY; prop.n];
        for (r, &t) in prop.to.iter().enumerate() {
            seg_max[t] = seg_max[t].max(values.get(r, 0));
        }
        let max_col = Matrix::from_vec(
            prop.to.len(),
            1,
            prop.to.iter().map(|&t| seg_max[t]).collect(),
        );
        let max_node = tape.constant(max_col);
        let shifted = tape.sub(scores, max_node)?;
        let exp = tape.exp(shifted);
        let denom = tape.scatter_add_rows(exp, Arc::clone(&prop.to), prop.n)?;
        let denom_rows = tape.gather_rows(denom, Arc::clone(&prop.to))?;
        let mut alpha = tape.div(exp, denom_rows)?;

        // attention-coefficient dropout on hidden layers
        if mode == Mode::Train && self.cfg.dropout_rate > 0.0 && hidden {
            alpha = self.dropout(tape, alpha, mode, rng)?;
        }

        let msgs = tape.gather_rows(wh, Arc::clone(&prop.from))?;
        let weighted = tape.mul(msgs, alpha)?;
        Ok(tape.scatter_add_rows(weighted, Arc::clone(&prop.to), prop.n)?)
    }

    fn batch_norm(
        &self,
        tape: &mut Tape,
        h: NodeId,
        bn: &BnSlots,
        mode: Mode,
        store: &mut ParamStore,
    ) -> Result<NodeId, NnError> {
        let gamma = tape.param(bn.gamma, store.get(bn.gamma));
        let beta = tape.param(bn.beta, store.get(bn.beta));
        let eps = tape.constant(Matrix::scalar(BN_EPS));
        let normalized = match mode {
            Mode::Train => {
                let mean = tape.mean_rows(h)?;
                let centered = tape.sub(h, mean)?;
                let sq = tape.mul(centered, centered)?;
                let var = tape.mean_rows(sq)?;
                let var_eps = tape.add(var, eps)?;
                let std = tape.sqrt(var_eps);
                let xhat = tape.div(centered, std)?;

                // update running statistics (outside the tape)
                let rows = tape.value(h).rows() as f64;
                let batch_mean = tape.value(mean).clone();
                let batch_var = tape.value(var).clone();
                let unbias = if rows > 1.0 { rows / (rows - 1.0) } else { 1.0 };
                let mut rm = store.get(bn.running_mean).clone();
                let mut rv = store.get(bn.running_var).clone();
                for c in 0..rm.cols() {
                    rm.set(0, c, BN_MOMENTUM * rm.get(0, c) + (1.0 - BN_MOMENTUM) * batch_mean.get(0, c));
                    rv.set(0, c, BN_MOMENTUM * rv.get(0, c) + (1.0 - BN_MOMENTUM) * batch_var.get(0, c) * unbias);
                }
                store.set(bn.running_mean, rm);
                store.set(bn.running_var, rv);
                xhat
            }
            Mode::Eval => {
                let rm = tape.constant(store.get(bn.running_mean).clone());
                let rv = tape.constant(store.get(bn.running_var).clone());
                let centered = tape.sub(h, rm)?;
                let var_eps = tape.add(rv, eps)?;
                let std = tape.sqrt(var_eps);
                tape.div(centered, std)?
            }
        };
        let scaled = tape.mul(normalized, gamma)?;
        Ok(tape.add(scaled, beta)?)
    }
}

/// Convenience constructor used by tests and the grad-check command.
pub fn build_model(
    cfg: &ModelConfig,
    input_dim: usize,
    output_dim: usize,
    seed: u64,
) -> Result<(Model, ParamStore), NnError> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = Model::build(cfg, input_dim, output_dim, &mut rng, &mut store)?;
    Ok((model, store))
}
