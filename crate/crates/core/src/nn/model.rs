//! The next-token network:
//!
//! ```text
//! context [10] -> embedding [L x 50]
//!   -> bidirectional LSTM, full sequence  [L x 2*H1]
//!   -> bidirectional LSTM, final states   [2*H2] -> ReLU
//!   -> dense [F] -> ReLU
//!   -> dense [V] -> softmax
//! ```
//!
//! `L` is the number of non-PAD context tokens. PAD timesteps are skipped
//! entirely in both directions, so a context's output depends only on its
//! real tokens.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lstm::{LstmCellParams, StepCache};
use super::tensor::{add_assign, Tensor2};
use crate::aggregate::WINDOW;
use crate::error::{Error, Result};
use crate::tokenize::{TokenIndex, PAD};

pub const LOG_EPS: f64 = 1e-12;

/// Layer sizes. Only `vocab_size` comes from the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub dense: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embedding_dim: 50,
            hidden1: 64,
            hidden2: 64,
            dense: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub w: Tensor2,
    pub b: Vec<f64>,
}

impl Dense {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Tensor2::zeros(output, input),
            b: vec![0.0; output],
        }
    }

    fn init(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: Tensor2::uniform(output, input, 1.0 / (input as f64).sqrt(), rng),
            b: vec![0.0; output],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone();
        self.w.matvec_acc(x, &mut out);
        out
    }

    fn add(&mut self, other: &Dense) {
        add_assign(self.w.data_mut(), other.w.data());
        add_assign(&mut self.b, &other.b);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `V x embedding_dim`
    pub embedding: Tensor2,
    pub lstm1_fwd: LstmCellParams,
    pub lstm1_bwd: LstmCellParams,
    pub lstm2_fwd: LstmCellParams,
    pub lstm2_bwd: LstmCellParams,
    pub dense_hidden: Dense,
    pub dense_out: Dense,
}

/// Names of the dense (non-embedding) parameter tensors, in the order used by
/// [`ModelParams::dense_slices_mut`] and [`ModelGrads::dense_slices`].
pub const DENSE_PARAM_NAMES: [&str; 16] = [
    "lstm1_fwd.w",
    "lstm1_fwd.u",
    "lstm1_fwd.b",
    "lstm1_bwd.w",
    "lstm1_bwd.u",
    "lstm1_bwd.b",
    "lstm2_fwd.w",
    "lstm2_fwd.u",
    "lstm2_fwd.b",
    "lstm2_bwd.w",
    "lstm2_bwd.u",
    "lstm2_bwd.b",
    "dense_hidden.w",
    "dense_hidden.b",
    "dense_out.w",
    "dense_out.b",
];

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ModelConfig {
            vocab_size,
            embedding_dim,
            hidden1,
            hidden2,
            dense,
        } = config;
        Self {
            config,
            embedding: Tensor2::uniform(
                vocab_size,
                embedding_dim,
                1.0 / (vocab_size as f64).sqrt(),
                &mut rng,
            ),
            lstm1_fwd: LstmCellParams::init(embedding_dim, hidden1, &mut rng),
            lstm1_bwd: LstmCellParams::init(embedding_dim, hidden1, &mut rng),
            lstm2_fwd: LstmCellParams::init(2 * hidden1, hidden2, &mut rng),
            lstm2_bwd: LstmCellParams::init(2 * hidden1, hidden2, &mut rng),
            dense_hidden: Dense::init(2 * hidden2, dense, &mut rng),
            dense_out: Dense::init(dense, vocab_size, &mut rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Every dense tensor, named as in [`DENSE_PARAM_NAMES`].
    pub fn dense_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(DENSE_PARAM_NAMES.len());
        for cell in [
            &mut self.lstm1_fwd,
            &mut self.lstm1_bwd,
            &mut self.lstm2_fwd,
            &mut self.lstm2_bwd,
        ] {
            out.extend(cell.slices_mut());
        }
        for d in [&mut self.dense_hidden, &mut self.dense_out] {
            out.push(d.w.data_mut());
            out.push(&mut d.b);
        }
        out
    }

    pub fn dense_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(DENSE_PARAM_NAMES.len());
        for cell in [&self.lstm1_fwd, &self.lstm1_bwd, &self.lstm2_fwd, &self.lstm2_bwd] {
            out.extend(cell.slices());
        }
        for d in [&self.dense_hidden, &self.dense_out] {
            out.push(d.w.data());
            out.push(&d.b);
        }
        out
    }

    /// The real (non-PAD) tokens of a context, validated.
    fn real_tokens(&self, context: &[TokenIndex; WINDOW]) -> Result<Vec<TokenIndex>> {
        let pads = context.iter().take_while(|&&t| t == PAD).count();
        let real = &context[pads..];
        if let Some(&bad) = real.iter().find(|&&t| t as usize >= self.vocab_size()) {
            return Err(Error::TokenOutOfRange {
                index: bad,
                vocab_size: self.vocab_size(),
            });
        }
        if real.contains(&PAD) {
            return Err(Error::InvalidContext(
                "PAD entries must form a contiguous left prefix".into(),
            ));
        }
        Ok(real.to_vec())
    }

    /// Next-token distribution for `context`, plus what backward needs.
    pub fn forward(&self, context: &[TokenIndex; WINDOW]) -> Result<(Vec<f64>, ForwardCache)> {
        let tokens = self.real_tokens(context)?;
        let h2 = self.config.hidden2;
        let len = tokens.len();

        let emb: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| self.embedding.row(t as usize).to_vec())
            .collect();

        let (l1f_out, l1f_cache) = self.lstm1_fwd.forward(&emb);
        let emb_rev: Vec<Vec<f64>> = emb.iter().rev().cloned().collect();
        let (mut l1b_out, l1b_cache) = self.lstm1_bwd.forward(&emb_rev);
        l1b_out.reverse();
        let l1_out: Vec<Vec<f64>> = l1f_out
            .iter()
            .zip(&l1b_out)
            .map(|(f, b)| f.iter().chain(b).copied().collect())
            .collect();

        let (l2f_out, l2f_cache) = self.lstm2_fwd.forward(&l1_out);
        let l1_rev: Vec<Vec<f64>> = l1_out.iter().rev().cloned().collect();
        let (l2b_out, l2b_cache) = self.lstm2_bwd.forward(&l1_rev);
        let mut l2_pre = vec![0.0; 2 * h2];
        if len > 0 {
            l2_pre[..h2].copy_from_slice(&l2f_out[len - 1]);
            l2_pre[h2..].copy_from_slice(&l2b_out[len - 1]);
        }
        let l2_act: Vec<f64> = l2_pre.iter().map(|&v| v.max(0.0)).collect();

        let hidden_pre = self.dense_hidden.apply(&l2_act);
        let hidden_act: Vec<f64> = hidden_pre.iter().map(|&v| v.max(0.0)).collect();
        let logits = self.dense_out.apply(&hidden_act);
        let probs = softmax(&logits);

        debug_assert_eq!(l1_out.len(), len);
        Ok((
            probs.clone(),
            ForwardCache {
                tokens,
                l1f_cache,
                l1b_cache,
                l2f_cache,
                l2b_cache,
                l2_pre,
                l2_act,
                hidden_pre,
                hidden_act,
                probs,
            },
        ))
    }

    /// Probabilities only.
    pub fn predict(&self, context: &[TokenIndex; WINDOW]) -> Result<Vec<f64>> {
        self.forward(context).map(|(p, _)| p)
    }

    /// Layer-1 bidirectional output for each real token, `[fwd, bwd]`.
    pub fn layer1_outputs(&self, context: &[TokenIndex; WINDOW]) -> Result<Vec<Vec<f64>>> {
        let tokens = self.real_tokens(context)?;
        let emb: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| self.embedding.row(t as usize).to_vec())
            .collect();
        let (f, _) = self.lstm1_fwd.forward(&emb);
        let rev: Vec<Vec<f64>> = emb.iter().rev().cloned().collect();
        let (mut b, _) = self.lstm1_bwd.forward(&rev);
        b.reverse();
        Ok(f.iter()
            .zip(&b)
            .map(|(f, b)| f.iter().chain(b).copied().collect())
            .collect())
    }

    /// Accumulates the gradient of `loss(probs, target, weight)` into `grads`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        target: TokenIndex,
        weight: f64,
        grads: &mut ModelGrads,
    ) {
        let h1 = self.config.hidden1;
        let h2 = self.config.hidden2;
        let len = cache.tokens.len();
        let t = target as usize;
        let p = &cache.probs;

        // d/dz_k of -w ln(p_t + eps) = -w/(p_t + eps) * p_t * (delta_tk - p_k)
        let coef = -weight * p[t] / (p[t] + LOG_EPS);
        let d_logits: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(k, &pk)| coef * (f64::from(u8::from(k == t)) - pk))
            .collect();

        grads.dense_out.w.outer_acc(&d_logits, &cache.hidden_act);
        add_assign(&mut grads.dense_out.b, &d_logits);
        let mut d_hidden = vec![0.0; self.config.dense];
        self.dense_out.w.matvec_t_acc(&d_logits, &mut d_hidden);
        relu_backward(&mut d_hidden, &cache.hidden_pre);

        grads.dense_hidden.w.outer_acc(&d_hidden, &cache.l2_act);
        add_assign(&mut grads.dense_hidden.b, &d_hidden);
        let mut d_l2 = vec![0.0; 2 * h2];
        self.dense_hidden.w.matvec_t_acc(&d_hidden, &mut d_l2);
        relu_backward(&mut d_l2, &cache.l2_pre);

        if len == 0 {
            return;
        }

        // Layer 2: only the final state of each direction feeds forward.
        let mut d_out = vec![vec![0.0; h2]; len];
        d_out[len - 1].copy_from_slice(&d_l2[..h2]);
        let d_l1_from_f = self.lstm2_fwd.backward(&cache.l2f_cache, &d_out, &mut grads.lstm2_fwd);
        d_out[len - 1].copy_from_slice(&d_l2[h2..]);
        let d_l1_from_b = self.lstm2_bwd.backward(&cache.l2b_cache, &d_out, &mut grads.lstm2_bwd);

        // d_l1[t] in original order; the backward direction saw position t at step len-1-t.
        let mut d_l1f = Vec::with_capacity(len);
        let mut d_l1b_rev = vec![Vec::new(); len];
        for pos in 0..len {
            let mut d = d_l1_from_f[pos].clone();
            add_assign(&mut d, &d_l1_from_b[len - 1 - pos]);
            d_l1b_rev[len - 1 - pos] = d[h1..].to_vec();
            d.truncate(h1);
            d_l1f.push(d);
        }
        let d_emb_f = self.lstm1_fwd.backward(&cache.l1f_cache, &d_l1f, &mut grads.lstm1_fwd);
        let d_emb_b = self.lstm1_bwd.backward(&cache.l1b_cache, &d_l1b_rev, &mut grads.lstm1_bwd);

        let dim = self.config.embedding_dim;
        for (pos, &tok) in cache.tokens.iter().enumerate() {
            let row = grads
                .embedding
                .entry(tok)
                .or_insert_with(|| vec![0.0; dim]);
            add_assign(row, &d_emb_f[pos]);
            add_assign(row, &d_emb_b[len - 1 - pos]);
        }
    }
}

fn relu_backward(d: &mut [f64], pre: &[f64]) {
    for (g, &z) in d.iter_mut().zip(pre) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Class-weighted cross-entropy `-weight * ln(probs[target] + 1e-12)`.
pub fn loss(probs: &[f64], target: TokenIndex, weight: f64) -> f64 {
    -weight * (probs[target as usize] + LOG_EPS).ln()
}

/// Intermediate values from [`ModelParams::forward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    tokens: Vec<TokenIndex>,
    l1f_cache: Vec<StepCache>,
    l1b_cache: Vec<StepCache>,
    l2f_cache: Vec<StepCache>,
    l2b_cache: Vec<StepCache>,
    l2_pre: Vec<f64>,
    l2_act: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden_act: Vec<f64>,
    probs: Vec<f64>,
}

impl ForwardCache {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Gradients shaped like [`ModelParams`]; the embedding gradient is kept
/// sparse, one row per token that appeared in a context.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub embedding: BTreeMap<TokenIndex, Vec<f64>>,
    pub lstm1_fwd: LstmCellParams,
    pub lstm1_bwd: LstmCellParams,
    pub lstm2_fwd: LstmCellParams,
    pub lstm2_bwd: LstmCellParams,
    pub dense_hidden: Dense,
    pub dense_out: Dense,
}

impl ModelGrads {
    pub fn zeros(config: &ModelConfig) -> Self {
        let ModelConfig {
            vocab_size,
            embedding_dim,
            hidden1,
            hidden2,
            dense,
        } = *config;
        Self {
            embedding: BTreeMap::new(),
            lstm1_fwd: LstmCellParams::zeros(embedding_dim, hidden1),
            lstm1_bwd: LstmCellParams::zeros(embedding_dim, hidden1),
            lstm2_fwd: LstmCellParams::zeros(2 * hidden1, hidden2),
            lstm2_bwd: LstmCellParams::zeros(2 * hidden1, hidden2),
            dense_hidden: Dense::zeros(2 * hidden2, dense),
            dense_out: Dense::zeros(dense, vocab_size),
        }
    }

    pub fn add(&mut self, other: &ModelGrads) {
        for (tok, row) in &other.embedding {
            match self.embedding.get_mut(tok) {
                Some(mine) => add_assign(mine, row),
                None => {
                    self.embedding.insert(*tok, row.clone());
                }
            }
        }
        self.lstm1_fwd.add(&other.lstm1_fwd);
        self.lstm1_bwd.add(&other.lstm1_bwd);
        self.lstm2_fwd.add(&other.lstm2_fwd);
        self.lstm2_bwd.add(&other.lstm2_bwd);
        self.dense_hidden.add(&other.dense_hidden);
        self.dense_out.add(&other.dense_out);
    }

    pub fn scale(&mut self, s: f64) {
        for row in self.embedding.values_mut() {
            row.iter_mut().for_each(|v| *v *= s);
        }
        for c in [
            &mut self.lstm1_fwd,
            &mut self.lstm1_bwd,
            &mut self.lstm2_fwd,
            &mut self.lstm2_bwd,
        ] {
            c.scale(s);
        }
        for d in [&mut self.dense_hidden, &mut self.dense_out] {
            d.w.data_mut().iter_mut().for_each(|v| *v *= s);
            d.b.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Same order as [`DENSE_PARAM_NAMES`].
    pub fn dense_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(DENSE_PARAM_NAMES.len());
        for cell in [&self.lstm1_fwd, &self.lstm1_bwd, &self.lstm2_fwd, &self.lstm2_bwd] {
            out.extend(cell.slices());
        }
        for d in [&self.dense_hidden, &self.dense_out] {
            out.push(d.w.data());
            out.push(&d.b);
        }
        out
    }

    /// Embedding gradient expanded to a full `V x dim` matrix.
    pub fn dense_embedding(&self, config: &ModelConfig) -> Tensor2 {
        let mut t = Tensor2::zeros(config.vocab_size, config.embedding_dim);
        for (&tok, row) in &self.embedding {
            t.row_mut(tok as usize).copy_from_slice(row);
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelParams {
        ModelParams::init(
            ModelConfig {
                vocab_size: 7,
                embedding_dim: 6,
                hidden1: 4,
                hidden2: 3,
                dense: 5,
            },
            3,
        )
    }

    #[test]
    fn output_is_a_distribution() {
        let m = small();
        let p = m.predict(&[0, 0, 0, 0, 0, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(p.len(), 7);
        assert!(p.iter().all(|&x| x >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn all_pad_depends_only_on_biases() {
        let mut m = small();
        let before = m.predict(&[PAD; WINDOW]).unwrap();
        // Scrambling every recurrent and embedding weight must not matter.
        m.embedding.fill(0.3);
        m.lstm1_fwd.w.fill(-0.2);
        m.lstm2_bwd.u.fill(0.9);
        assert_eq!(m.predict(&[PAD; WINDOW]).unwrap(), before);
    }

    #[test]
    fn rejects_bad_contexts() {
        let m = small();
        assert!(matches!(
            m.predict(&[0, 0, 0, 0, 0, 0, 0, 0, 0, 7]),
            Err(Error::TokenOutOfRange { index: 7, .. })
        ));
        assert!(matches!(
            m.predict(&[0, 0, 0, 0, 0, 0, 0, 2, 0, 3]),
            Err(Error::InvalidContext(_))
        ));
    }

    #[test]
    fn loss_examples() {
        assert!(loss(&[1.0, 0.0, 0.0], 0, 1.0).abs() < 1e-11);
        let uniform = [0.25; 4];
        assert!((loss(&uniform, 2, 1.0) - 4f64.ln()).abs() < 1e-10);
        assert_eq!(loss(&uniform, 2, 2.0), 2.0 * loss(&uniform, 2, 1.0));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax(&[1000.0, 0.0, -1000.0]);
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
    }
}
