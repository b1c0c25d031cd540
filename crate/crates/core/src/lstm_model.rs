//! Training the next-token network on clean-baseline windows and scoring
//! test tokens with it.
//!
//! A token's outlier score is minus the probability the model assigned to
//! it. Targets that were never seen in training (encoded as UNK) score 0,
//! the most anomalous value.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    build_sequences, class_weights, windows_for_all, AggregationRule, ClassWeights, WindowedExample,
};
use crate::error::{Error, Result};
use crate::ingest::{DatasetSplit, InternalNetworks, RowId};
use crate::nn::{adam_step, loss, AdamConfig, AdamState, ModelConfig, ModelGrads, ModelParams};
use crate::tokenize::{build_vocab, Feature, Vocabulary, UNK};

/// Examples per gradient work unit. Fixed so that summation order (and
/// therefore the result) does not depend on the number of threads.
const GRAD_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
    pub seed: u64,
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 256,
            learning_rate: 1e-3,
            validation_fraction: 0.1,
            seed: 0,
            early_stop_patience: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be positive");
        }
        Ok(())
    }
}

/// Layer sizes that do not depend on the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub embedding_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub dense: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        let c = ModelConfig::new(0);
        Self {
            embedding_dim: c.embedding_dim,
            hidden1: c.hidden1,
            hidden2: c.hidden2,
            dense: c.dense,
        }
    }
}

impl ModelDims {
    pub fn with_vocab(self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embedding_dim: self.embedding_dim,
            hidden1: self.hidden1,
            hidden2: self.hidden2,
            dense: self.dense,
        }
    }
}

/// `(train, validation)` sizes; both at least 1.
pub fn validation_split_sizes(n: usize, fraction: f64) -> (usize, usize) {
    let val = ((n as f64) * fraction).round() as usize;
    let val = val.clamp(1, n.saturating_sub(1).max(1));
    (n - val, val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub params: ModelParams,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub train_count: usize,
    pub val_count: usize,
}

/// Mean weighted loss and the summed gradient over `batch`.
fn batch_gradient(
    params: &ModelParams,
    batch: &[&WindowedExample],
    weights: &ClassWeights,
) -> Result<(f64, ModelGrads)> {
    let partials: Vec<Result<(f64, ModelGrads)>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = ModelGrads::zeros(&params.config);
            let mut total = 0.0;
            for ex in chunk {
                let (probs, cache) = params.forward(&ex.context)?;
                let w = weights.get(ex.target);
                total += loss(&probs, ex.target, w);
                params.backward(&cache, ex.target, w, &mut grads);
            }
            Ok((total, grads))
        })
        .collect();
    let mut grads = ModelGrads::zeros(&params.config);
    let mut total = 0.0;
    for part in partials {
        let (l, g) = part?;
        total += l;
        grads.add(&g);
    }
    Ok((total, grads))
}

/// Mean weighted loss over `examples`.
pub fn mean_loss(params: &ModelParams, examples: &[&WindowedExample], weights: &ClassWeights) -> Result<f64> {
    let losses: Vec<Result<f64>> = examples
        .par_iter()
        .map(|ex| {
            let probs = params.predict(&ex.context)?;
            Ok(loss(&probs, ex.target, weights.get(ex.target)))
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Fraction of examples whose most probable next token is the target.
pub fn accuracy(params: &ModelParams, examples: &[WindowedExample]) -> Result<f64> {
    let mut hits = 0usize;
    for ex in examples {
        let probs = params.predict(&ex.context)?;
        let best = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        hits += usize::from(best == ex.target as usize);
    }
    Ok(hits as f64 / examples.len().max(1) as f64)
}

/// Trains a fresh model.
///
/// The validation set is the last `validation_fraction` of the examples in
/// row order (row ids follow input order, which is time order for flow
/// exports). Training stops after `cfg.epochs` or when validation loss has
/// not improved for `cfg.early_stop_patience` epochs, and returns the
/// best-validation parameters.
pub fn train(
    examples: &[WindowedExample],
    weights: &ClassWeights,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if examples.len() < 2 {
        return Err(Error::InsufficientData {
            what: "training examples",
            needed: 2,
            got: examples.len(),
        });
    }
    let mut ordered: Vec<&WindowedExample> = examples.iter().collect();
    ordered.sort_by_key(|e| e.target_ref);
    let (n_train, n_val) = validation_split_sizes(ordered.len(), cfg.validation_fraction);
    let (train_set, val_set) = ordered.split_at(n_train);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(*model, rng.gen());
    let mut state = AdamState::new(&params);
    let hp = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };

    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut history = Vec::new();
    let mut stale = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&WindowedExample> = idx.iter().map(|&i| train_set[i]).collect();
            let (batch_loss, mut grads) = batch_gradient(&params, &batch, weights)?;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            epoch_loss += batch_loss;
            grads.scale(1.0 / batch.len() as f64);
            adam_step(&mut params, &grads, &mut state, &hp)?;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_loss = mean_loss(&params, val_set, weights)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: usize::MAX });
        }
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, params.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best.1,
        history,
        best_epoch: best.2,
        train_count: n_train,
        val_count: n_val,
    })
}

/// One test token's outlier score, in `[-1, 0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredToken {
    pub target_ref: RowId,
    pub score: f64,
    pub label: String,
}

/// Scores every example: `-p(target | context)`, or 0 for an UNK target.
pub fn score_tokens(
    params: &ModelParams,
    examples: &[WindowedExample],
    labels: &HashMap<RowId, String>,
) -> Result<Vec<ScoredToken>> {
    let scored: Vec<Result<ScoredToken>> = examples
        .par_iter()
        .map(|ex| {
            let label = labels
                .get(&ex.target_ref)
                .ok_or(Error::MissingLabel(ex.target_ref))?
                .clone();
            let score = if ex.target == UNK {
                0.0
            } else {
                -params.predict(&ex.context)?[ex.target as usize]
            };
            Ok(ScoredToken {
                target_ref: ex.target_ref,
                score,
                label,
            })
        })
        .collect();
    scored.into_iter().collect()
}

/// One score per flow, ordered by row id. A flow reached through two
/// sequences (an internal-to-internal flow under the internal rule) keeps
/// its higher score.
pub fn collapse_by_row(mut scored: Vec<ScoredToken>) -> Vec<ScoredToken> {
    scored.sort_by(|a, b| a.target_ref.cmp(&b.target_ref).then(b.score.total_cmp(&a.score)));
    scored.dedup_by_key(|s| s.target_ref);
    scored
}

/// Resamples with replacement, keeping the count.
pub fn bootstrap_resample(examples: &[WindowedExample], seed: u64) -> Vec<WindowedExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..examples.len())
        .map(|_| examples[rng.gen_range(0..examples.len())])
        .collect()
}

/// Trains bootstrap replica `replica`: the windows are resampled and the
/// model initialised from `seed + replica`.
pub fn train_replica(
    train_windows: &[WindowedExample],
    replica: u32,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let seed = cfg.seed.wrapping_add(u64::from(replica));
    let sample = bootstrap_resample(train_windows, seed);
    let weights = class_weights(sample.iter().map(|e| e.target))?;
    train(&sample, &weights, model, &TrainConfig { seed, ..cfg.clone() })
}

/// Window strides used when scoring test sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Strides {
    pub protobytes: usize,
    pub ports: usize,
}

impl Default for Strides {
    fn default() -> Self {
        Self {
            protobytes: 1,
            ports: 3,
        }
    }
}

impl Strides {
    pub fn for_feature(&self, feature: Feature) -> usize {
        match feature {
            Feature::Protobytes => self.protobytes,
            Feature::Ports => self.ports,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GridOptions {
    pub features: Vec<Feature>,
    pub rules: Vec<AggregationRule>,
    pub replicas: u32,
    pub train: TrainConfig,
    pub dims: ModelDims,
    pub strides: Strides,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            features: Feature::ALL.to_vec(),
            rules: AggregationRule::ALL.to_vec(),
            replicas: 3,
            train: TrainConfig::default(),
            dims: ModelDims::default(),
            strides: Strides::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GridCell {
    pub feature: Feature,
    pub rule: AggregationRule,
    pub replica: u32,
    pub history: Vec<EpochStats>,
    pub train_windows: usize,
    pub scores: Vec<ScoredToken>,
}

/// Training vocabulary for `feature`.
pub fn feature_vocab(split: &DatasetSplit, feature: Feature) -> Result<Vocabulary> {
    build_vocab(split.train.iter().map(|r| feature.token(r)))
}

/// Runs every `(feature, rule, replica)` cell in memory: train on the
/// training day's stride-1 windows, score the test days' windows.
pub fn run_grid(split: &DatasetSplit, internal: &InternalNetworks, opts: &GridOptions) -> Result<Vec<GridCell>> {
    let labels: HashMap<RowId, String> = split
        .test
        .iter()
        .map(|r| (r.row_id, r.label.clone()))
        .collect();
    let mut cells = Vec::new();
    for &feature in &opts.features {
        let vocab = feature_vocab(split, feature)?;
        let model = opts.dims.with_vocab(vocab.len());
        for &rule in &opts.rules {
            let train_units = build_sequences(&split.train, rule, &vocab, feature, internal);
            let train_windows = windows_for_all(&train_units, 1);
            let test_units = build_sequences(&split.test, rule, &vocab, feature, internal);
            let test_windows = windows_for_all(&test_units, opts.strides.for_feature(feature));
            for replica in 0..opts.replicas {
                let outcome = train_replica(&train_windows, replica, &model, &opts.train)?;
                let scores = collapse_by_row(score_tokens(&outcome.params, &test_windows, &labels)?);
                cells.push(GridCell {
                    feature,
                    rule,
                    replica,
                    history: outcome.history,
                    train_windows: train_windows.len(),
                    scores,
                });
            }
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::WINDOW;
    use crate::tokenize::PAD;

    fn tiny_model(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            embedding_dim: 50,
            hidden1: 8,
            hidden2: 8,
            dense: 8,
        }
    }

    fn example(context: [u32; WINDOW], target: u32, target_ref: RowId) -> WindowedExample {
        WindowedExample {
            context,
            target,
            target_ref,
        }
    }

    #[test]
    fn validation_split_ratio() {
        assert_eq!(validation_split_sizes(450_000, 0.1), (405_000, 45_000));
        assert_eq!(validation_split_sizes(2, 0.1), (1, 1));
        assert_eq!(validation_split_sizes(10, 0.99), (1, 9));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { validation_fraction: 1.0, ..Default::default() },
            TrainConfig { validation_fraction: 0.0, ..Default::default() },
            TrainConfig { learning_rate: -1.0, ..Default::default() },
            TrainConfig { early_stop_patience: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn too_few_examples() {
        let ex = [example([PAD; WINDOW], 2, 0)];
        let err = train(&ex, &ClassWeights::uniform(), &tiny_model(4), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientData { got: 1, .. }));
    }

    #[test]
    fn unk_targets_score_zero() {
        let params = ModelParams::init(tiny_model(5), 0);
        let labels: HashMap<RowId, String> = [(1, "BENIGN".into()), (2, "X".into())].into();
        let ex = [
            example([PAD; WINDOW], UNK, 1),
            example([0, 0, 0, 0, 0, 0, 0, 0, 2, 3], 4, 2),
        ];
        let scored = score_tokens(&params, &ex, &labels).unwrap();
        assert_eq!(scored[0].score, 0.0);
        let p = params.predict(&ex[1].context).unwrap()[4];
        assert_eq!(scored[1].score, -p);
        assert_eq!(scored[1].label, "X");
        assert!(scored.iter().all(|s| (-1.0..=0.0).contains(&s.score)));
        assert_eq!(score_tokens(&params, &ex, &labels).unwrap(), scored);

        let missing = score_tokens(&params, &[example([PAD; WINDOW], 2, 9)], &labels);
        assert!(matches!(missing, Err(Error::MissingLabel(9))));
    }

    #[test]
    fn duplicate_rows_keep_the_higher_score() {
        let t = |r, score| ScoredToken {
            target_ref: r,
            score,
            label: "BENIGN".into(),
        };
        let out = collapse_by_row(vec![t(5, -0.5), t(2, -0.1), t(5, -0.2), t(2, -0.3)]);
        assert_eq!(out, vec![t(2, -0.1), t(5, -0.2)]);
    }

    #[test]
    fn bootstrap_keeps_size_and_is_seeded() {
        let ex: Vec<_> = (0..50).map(|i| example([PAD; WINDOW], 2, i)).collect();
        let a = bootstrap_resample(&ex, 3);
        assert_eq!(a.len(), ex.len());
        assert_eq!(a, bootstrap_resample(&ex, 3));
        assert_ne!(a, bootstrap_resample(&ex, 4));
        let distinct: std::collections::HashSet<_> = a.iter().map(|e| e.target_ref).collect();
        assert!(distinct.len() < ex.len());
    }

    #[test]
    fn seeded_training_is_bit_identical() {
        let seq = [2u32, 3, 4, 2, 5];
        let ex: Vec<_> = (0..40)
            .map(|i| {
                let mut ctx = [PAD; WINDOW];
                for k in 0..WINDOW.min(i) {
                    ctx[WINDOW - 1 - k] = seq[(i - 1 - k) % seq.len()];
                }
                example(ctx, seq[i % seq.len()], i as RowId)
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            learning_rate: 1e-2,
            seed: 5,
            ..Default::default()
        };
        let w = class_weights(ex.iter().map(|e| e.target)).unwrap();
        let a = train(&ex, &w, &tiny_model(6), &cfg).unwrap();
        let b = train(&ex, &w, &tiny_model(6), &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        assert_eq!((a.train_count, a.val_count), (36, 4));
    }
}
