//! Adam with lazy embedding updates.
//!
//! Dense tensors follow the usual Adam rule with a shared step counter.
//! Embedding rows are only touched when they received a gradient in the
//! current step: their moments and their own step counter advance, every
//! other row is left exactly as it was.

use serde::{Deserialize, Serialize};

use super::model::{ModelGrads, ModelParams, DENSE_PARAM_NAMES};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based).
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, hp: &AdamConfig) {
    let bc1 = 1.0 - hp.beta1.powf(t as f64);
    let bc2 = 1.0 - hp.beta2.powf(t as f64);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    emb_m: Tensor2,
    emb_v: Tensor2,
    row_steps: Vec<u64>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let shapes: Vec<usize> = params.dense_slices().iter().map(|s| s.len()).collect();
        let (rows, cols) = params.embedding.shape();
        Self {
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            emb_m: Tensor2::zeros(rows, cols),
            emb_v: Tensor2::zeros(rows, cols),
            row_steps: vec![0; rows],
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// How many updates embedding row `row` has received.
    pub fn row_step(&self, row: usize) -> u64 {
        self.row_steps[row]
    }
}

/// Applies one optimizer step. Gradients are checked for finiteness before
/// anything is modified.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelGrads,
    state: &mut AdamState,
    hp: &AdamConfig,
) -> Result<()> {
    let dense_grads = grads.dense_slices();
    for (name, g) in DENSE_PARAM_NAMES.iter().zip(&dense_grads) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient((*name).to_string()));
        }
    }
    for (&row, g) in &grads.embedding {
        if row as usize >= params.embedding.rows() {
            return Err(Error::TokenOutOfRange {
                index: row,
                vocab_size: params.embedding.rows(),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("embedding[{row}]")));
        }
    }

    state.step += 1;
    let t = state.step;
    for (((p, g), m), v) in params
        .dense_slices_mut()
        .into_iter()
        .zip(&dense_grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        adam_update(p, g, m, v, t, hp);
    }
    for (&row, g) in &grads.embedding {
        let r = row as usize;
        state.row_steps[r] += 1;
        adam_update(
            params.embedding.row_mut(r),
            g,
            state.emb_m.row_mut(r),
            state.emb_v.row_mut(r),
            state.row_steps[r],
            hp,
        );
    }
    Ok(())
}
