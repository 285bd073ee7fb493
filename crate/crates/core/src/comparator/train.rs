use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate_scores, BinaryMetrics};
use super::{gather, ComparatorModel, Mode};
use crate::embedstore::EmbeddingStore;
use crate::error::{Error, Result};
use crate::numkernel::kernels::sigmoid;
use crate::numkernel::{Tape, Tensor};
use crate::pairsampler::PairSet;

/// Fraction of the steps spent raising the learning rate.
pub const WARMUP_FRACTION: f64 = 0.3;
/// Starting learning rate is `max_lr / INITIAL_DIV`.
pub const INITIAL_DIV: f64 = 25.0;
/// Final learning rate is `max_lr / FINAL_DIV`.
pub const FINAL_DIV: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub max_lr: f64,
    pub seed: u64,
    /// Decision threshold used for the per-epoch evaluation.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 256,
            momentum: 0.9,
            max_lr: 0.01,
            seed: 42,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    /// Ten epochs at a higher peak rate, paired with [`Architecture::desk`].
    ///
    /// [`Architecture::desk`]: crate::experiment::Architecture::desk
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 10,
            max_lr: 0.05,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2 for batch normalization".into()));
        }
        if !(self.max_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("max_lr must be positive and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub eval: BinaryMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    /// 1-based epoch whose weights were kept.
    pub selected_epoch: usize,
}

fn cosine(from: f64, to: f64, t: f64) -> f64 {
    to + (from - to) * (1.0 + (PI * t).cos()) / 2.0
}

/// One-cycle learning rate at `step` of `total`: cosine rise from
/// `max_lr / 25` to `max_lr` over the first 30% of steps, then cosine decay
/// to `max_lr / 10⁴`.
pub fn one_cycle_lr(step: usize, total: usize, max_lr: f64) -> f64 {
    let initial = max_lr / INITIAL_DIV;
    let last = max_lr / FINAL_DIV;
    let warm = (WARMUP_FRACTION * total as f64).max(1.0);
    let s = step as f64;
    if s < warm {
        cosine(initial, max_lr, s / warm)
    } else {
        let rest = (total as f64 - warm).max(1.0);
        cosine(max_lr, last, ((s - warm) / rest).min(1.0))
    }
}

/// Index of the highest F1; the earliest wins ties.
pub fn select_checkpoint(f1: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in f1.iter().enumerate() {
        if best.is_none_or(|b| v > f1[b]) {
            best = Some(i);
        }
    }
    best
}

/// Batch boundaries over `n` items; a trailing batch of one is dropped
/// because batch normalization cannot use it.
fn batches(n: usize, size: usize) -> Vec<(usize, usize)> {
    (0..n)
        .step_by(size)
        .map(|s| (s, (s + size).min(n)))
        .filter(|(s, e)| e - s >= 2)
        .collect()
}

/// Trains with binary cross-entropy and momentum SGD under the one-cycle
/// schedule, evaluating on `eval` after every epoch and returning the weights
/// of the epoch with the best F1.
pub fn train(
    mut model: ComparatorModel,
    store: &EmbeddingStore,
    train_pairs: &PairSet,
    eval_pairs: &PairSet,
    config: &TrainConfig,
) -> Result<(ComparatorModel, TrainReport)> {
    config.validate()?;
    if train_pairs.is_empty() || eval_pairs.is_empty() {
        return Err(Error::Validation("training and evaluation pair sets must be non-empty".into()));
    }
    let jitter = model.config().jitter;
    let noise = Normal::new(0.0, jitter.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let spans = batches(order.len(), config.batch_size);
    let total_steps = spans.len() * config.epochs;
    let eval_labels: Vec<bool> = eval_pairs.pairs.iter().map(|p| p.label.is_positive()).collect();
    let (tokens, depth) = (model.config().tokens, model.config().depth);

    let mut velocity: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut reports = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, ComparatorModel)> = None;
    let mut step = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (b, &(s, e)) in spans.iter().enumerate() {
            let batch: Vec<_> = order[s..e].iter().map(|&i| train_pairs.pairs[i]).collect();
            let (mut g1, mut g2) = gather(store, &batch)?;
            if jitter > 0.0 {
                for v in g1.iter_mut().chain(g2.iter_mut()) {
                    *v += noise.sample(&mut rng);
                }
            }
            let labels: Vec<f64> = batch.iter().map(|p| p.label.target()).collect();
            let n = batch.len();

            let mut tape = Tape::new();
            let params = model.bind(&mut tape);
            let x1 = tape.constant(Tensor::new(vec![n, tokens, depth], g1)?);
            let x2 = tape.constant(Tensor::new(vec![n, tokens, depth], g2)?);
            let out = model.forward(&mut tape, &params, x1, x2, Mode::Train)?;
            let loss = tape.bce_with_logits(out.logits, &labels)?;
            let loss_value = tape.value(loss)?.item();
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss: loss_value,
                });
            }
            let logits = tape.value(out.logits)?.data();
            correct += logits
                .iter()
                .zip(&labels)
                .filter(|(&o, &y)| (sigmoid(o) > config.threshold) == (y > 0.5))
                .count();
            loss_sum += loss_value * n as f64;
            seen += n;

            let grads = tape.backward(loss)?;
            let lr = one_cycle_lr(step, total_steps, config.max_lr);
            step += 1;
            for ((p, v), var) in model.params_mut().iter_mut().zip(velocity.iter_mut()).zip(&params) {
                let g = grads.get(*var)?;
                for ((w, m), &d) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                    *m = config.momentum * *m + d;
                    *w -= lr * *m;
                }
            }
            model.update_running(&out.stats);
        }

        let scores = model.score_pairs(store, &eval_pairs.pairs, 512)?;
        let eval = evaluate_scores(&scores, &eval_labels, config.threshold)?;
        if best.as_ref().is_none_or(|(f1, _)| eval.f1 > *f1) {
            best = Some((eval.f1, model.clone()));
        }
        reports.push(EpochReport {
            epoch,
            loss: loss_sum / seen.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            eval,
        });
    }

    let f1: Vec<f64> = reports.iter().map(|r| r.eval.f1).collect();
    let selected = select_checkpoint(&f1).expect("at least one epoch");
    let (_, chosen) = best.expect("at least one epoch");
    Ok((
        chosen,
        TrainReport {
            epochs: reports,
            selected_epoch: selected + 1,
        },
    ))
}
