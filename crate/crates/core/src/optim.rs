//! Adam with bias correction.
//!
//! Defaults follow the experiment configuration used everywhere in this
//! project: beta1 = 0.9, beta2 = 0.99, epsilon = 1e-7.

use std::collections::HashMap;

use crate::tensor::{Matrix, TensorError};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.99, epsilon: 1e-7 }
    }
}

struct MomentPair {
    m: Matrix,
    v: Matrix,
}

/// Per-parameter first/second moments plus the shared step counter.
pub struct AdamState {
    cfg: AdamConfig,
    moments: Vec<MomentPair>,
    step: u64,
}

impl AdamState {
    /// One moment pair per parameter, shaped like the parameters.
    pub fn new(cfg: AdamConfig, params: &[Matrix]) -> Self {
        let moments = params
            .iter()
            .map(|p| MomentPair { m: Matrix::zeros(p.rows(), p.cols()), v: Matrix::zeros(p.rows(), p.cols()) })
            .collect();
        AdamState { cfg, moments, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected Adam update. Parameters without a gradient entry are
/// treated as having a zero gradient (their moments still decay).
pub fn adam_step(
    params: &mut [Matrix],
    grads: &HashMap<usize, Matrix>,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TensorError> {
    if lr <= 0.0 {
        return Err(TensorError::Contract(format!("learning rate {lr} must be positive")));
    }
    assert_eq!(params.len(), state.moments.len(), "adam state not aligned with params");
    state.step += 1;
    let AdamConfig { beta1, beta2, epsilon } = state.cfg;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (slot, param) in params.iter_mut().enumerate() {
        let pair = &mut state.moments[slot];
        debug_assert_eq!(pair.m.shape(), param.shape());
        let zero;
        let grad = match grads.get(&slot) {
            Some(g) => {
                if g.shape() != param.shape() {
                    return Err(TensorError::DimensionMismatch {
                        op: "adam_step",
                        lhs_rows: param.rows(),
                        lhs_cols: param.cols(),
                        rhs_rows: g.rows(),
                        rhs_cols: g.cols(),
                    });
                }
                g
            }
            None => {
                zero = Matrix::zeros(param.rows(), param.cols());
                &zero
            }
        };
        for i in 0..param.len() {
            let g = grad.data()[i];
            let m = beta1 * pair.m.data()[i] + (1.0 - beta1) * g;
            let v = beta2 * pair.v.data()[i] + (1.0 - beta2) * g * g;
            pair.m.data_mut()[i] = m;
            pair.v.data_mut()[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            param.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}
