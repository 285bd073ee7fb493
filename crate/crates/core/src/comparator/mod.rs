//! The pair comparator: a siamese token encoder with cross-attention fusion
//! and an MLP head that scores whether two images show the same class.
//!
//! For each branch, `x = [cls ‖ grid] + pos`. Each of the `L` blocks applies
//! `N` residual self-attention layers (`y = x + MHSA(x)`, parameters shared by
//! both branches) followed by `M` cross-attention fusions. The two CLS tokens
//! are concatenated and passed through
//! `Linear(2D, 512) → BN → GELU → Linear(512, h) → BN → GELU → Linear(h, 2) → Linear(2, 1)`;
//! the score is the sigmoid of that logit. With `L = 0` the CLS path is
//! replaced by the token mean of `x`, leaving a plain MLP comparator.

mod checkpoint;
mod metrics;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{CheckpointHeader, CHECKPOINT_FORMAT};
pub use metrics::{evaluate_scores, BinaryMetrics, ConfidenceBreakdown};
pub use train::{one_cycle_lr, select_checkpoint, train, EpochReport, TrainConfig, TrainReport};

use crate::embedstore::EmbeddingStore;
use crate::error::{Error, Result};
use crate::ids::Split;
use crate::numkernel::kernels::sigmoid;
use crate::numkernel::{cross_attention, mhsa, AttentionVars, BatchStats, NormStats, Tape, Tensor, Var};
use crate::pairsampler::PairSample;

/// Width of the first MLP layer.
pub const MLP_WIDE: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparatorConfig {
    /// Number of blocks (`L`).
    pub blocks: usize,
    /// Cross-attention fusions per block (`M`).
    pub cross_layers: usize,
    /// Self-attention layers per block (`N`).
    pub self_layers: usize,
    pub heads: usize,
    /// Feature depth `D`.
    pub depth: usize,
    /// Tokens per image `T`.
    pub tokens: usize,
    #[serde(default = "default_hidden")]
    pub mlp_hidden: usize,
    /// Standard deviation of Gaussian noise added to training grids.
    #[serde(default)]
    pub jitter: f64,
}

fn default_hidden() -> usize {
    32
}

impl ComparatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.tokens == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("depth, tokens and mlp_hidden must be positive".into()));
        }
        if self.heads == 0 || self.depth % self.heads != 0 {
            return Err(Error::Config(format!("depth {} is not divisible into {} heads", self.depth, self.heads)));
        }
        if !(self.jitter >= 0.0) || !self.jitter.is_finite() {
            return Err(Error::Config(format!("jitter must be a finite non-negative value, got {}", self.jitter)));
        }
        Ok(())
    }

    /// Shapes of every parameter tensor, in canonical order.
    pub fn parameter_shapes(&self) -> Vec<Vec<usize>> {
        let d = self.depth;
        let h = self.mlp_hidden;
        let mut shapes = vec![vec![d], vec![self.tokens + 1, d]];
        let attention = [vec![d, d], vec![d], vec![d, d], vec![d], vec![d, d], vec![d], vec![d, d], vec![d]];
        for _ in 0..self.blocks * (self.self_layers + self.cross_layers) {
            shapes.extend(attention.iter().cloned());
        }
        shapes.extend([
            vec![2 * d, MLP_WIDE],
            vec![MLP_WIDE],
            vec![MLP_WIDE],
            vec![MLP_WIDE],
            vec![MLP_WIDE, h],
            vec![h],
            vec![h],
            vec![h],
            vec![h, 2],
            vec![2],
            vec![2, 1],
            vec![1],
        ]);
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// Batch-norm behavior for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are returned for updating.
    Train,
    /// Stored running statistics.
    Eval,
}

/// Output of [`ComparatorModel::forward`].
#[derive(Debug)]
pub struct ForwardPass {
    /// Logits, shaped `batch×1×1`.
    pub logits: Var,
    /// Batch statistics of the two batch-norm layers (train mode only).
    pub stats: Vec<BatchStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparatorModel {
    config: ComparatorConfig,
    params: Vec<Tensor>,
    /// Running mean and variance of the two batch-norm layers.
    running: [(Vec<f64>, Vec<f64>); 2],
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

impl ComparatorModel {
    /// Fresh model. Linear layers are drawn from `U(±1/√fan_in)`, CLS and
    /// positional embeddings from `N(0, 0.02²)`; the final layer is zero so
    /// an untrained model scores every pair 0.5.
    pub fn new(config: ComparatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let shapes = config.parameter_shapes();
        let last = shapes.len() - 2;
        let mut params = Vec::with_capacity(shapes.len());
        let mut fan_in = 1;
        for (i, shape) in shapes.iter().enumerate() {
            let t = if i < 2 {
                Tensor::from_fn(shape, |_| normal.sample(&mut rng))
            } else if i >= last {
                Tensor::zeros(shape)
            } else if shape.len() == 2 {
                fan_in = shape[0];
                uniform(&mut rng, shape, 1.0 / (fan_in as f64).sqrt())
            } else if Self::is_norm_scale(&config, i) {
                Tensor::filled(shape, 1.0)
            } else if Self::is_norm_shift(&config, i) {
                Tensor::zeros(shape)
            } else {
                uniform(&mut rng, shape, 1.0 / (fan_in as f64).sqrt())
            };
            params.push(t);
        }
        let running = [
            (vec![0.0; MLP_WIDE], vec![1.0; MLP_WIDE]),
            (vec![0.0; config.mlp_hidden], vec![1.0; config.mlp_hidden]),
        ];
        Ok(ComparatorModel { config, params, running })
    }

    fn mlp_start(config: &ComparatorConfig) -> usize {
        2 + config.blocks * (config.self_layers + config.cross_layers) * AttentionVars::TENSORS
    }

    fn is_norm_scale(config: &ComparatorConfig, i: usize) -> bool {
        let m = Self::mlp_start(config);
        i == m + 2 || i == m + 6
    }

    fn is_norm_shift(config: &ComparatorConfig, i: usize) -> bool {
        let m = Self::mlp_start(config);
        i == m + 3 || i == m + 7
    }

    /// Rebuilds a model from stored parameters and running statistics.
    pub fn from_parts(config: ComparatorConfig, params: Vec<Tensor>, running: [(Vec<f64>, Vec<f64>); 2]) -> Result<Self> {
        config.validate()?;
        let shapes = config.parameter_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Validation(format!("expected {} parameter tensors, got {}", shapes.len(), params.len())));
        }
        for (s, p) in shapes.iter().zip(&params) {
            if p.shape() != s.as_slice() {
                return Err(Error::dim("comparator parameter", s, p.shape()));
            }
            if !p.is_finite() {
                return Err(Error::Validation("non-finite comparator parameter".into()));
            }
        }
        if running[0].0.len() != MLP_WIDE
            || running[0].1.len() != MLP_WIDE
            || running[1].0.len() != config.mlp_hidden
            || running[1].1.len() != config.mlp_hidden
        {
            return Err(Error::Validation("running statistics have the wrong width".into()));
        }
        Ok(ComparatorModel { config, params, running })
    }

    pub fn config(&self) -> &ComparatorConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn running(&self) -> &[(Vec<f64>, Vec<f64>); 2] {
        &self.running
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Folds the batch statistics of a training step into the running averages.
    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (s, (mean, var)) in stats.iter().zip(self.running.iter_mut()) {
            s.update_running(mean, var);
        }
    }

    /// Places every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Places every parameter on the tape as a constant.
    pub fn bind_constant(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    fn embed(&self, tape: &mut Tape, cls: Var, pos: Var, grid: Var) -> Result<Var> {
        let x = tape.prepend_token(cls, grid)?;
        tape.add_broadcast(x, pos)
    }

    /// Forward pass over `batch×T×D` grids already on the tape.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], grid1: Var, grid2: Var, mode: Mode) -> Result<ForwardPass> {
        let c = &self.config;
        let expected = [tape.value(grid1)?.shape()[0], c.tokens, c.depth];
        for g in [grid1, grid2] {
            if tape.value(g)?.shape() != expected {
                return Err(Error::dim("comparator input", &expected, tape.value(g)?.shape()));
            }
        }
        let (cls, pos) = (params[0], params[1]);
        let mut x1 = self.embed(tape, cls, pos, grid1)?;
        let mut x2 = self.embed(tape, cls, pos, grid2)?;

        let mut next = 2;
        let mut take = |n: usize| {
            let s = &params[next..next + n];
            next += n;
            s
        };
        for _ in 0..c.blocks {
            for _ in 0..c.self_layers {
                let p = AttentionVars::from_slice(take(AttentionVars::TENSORS));
                let a1 = mhsa(tape, x1, &p, c.heads)?;
                x1 = tape.add(x1, a1)?;
                let a2 = mhsa(tape, x2, &p, c.heads)?;
                x2 = tape.add(x2, a2)?;
            }
            for _ in 0..c.cross_layers {
                let p = AttentionVars::from_slice(take(AttentionVars::TENSORS));
                (x1, x2) = cross_attention(tape, x1, x2, &p, c.heads)?;
            }
        }
        let mlp = take(12).to_vec();

        let (r1, r2) = if c.blocks == 0 {
            (tape.mean_tokens(x1)?, tape.mean_tokens(x2)?)
        } else {
            (tape.token(x1, 0)?, tape.token(x2, 0)?)
        };
        let mut h = tape.concat_features(r1, r2)?;
        let mut stats = Vec::new();
        for (layer, w) in [0usize, 4].into_iter().enumerate() {
            h = tape.linear(h, mlp[w], mlp[w + 1])?;
            let norm = match mode {
                Mode::Train => NormStats::Batch,
                Mode::Eval => NormStats::Running {
                    mean: &self.running[layer].0,
                    var: &self.running[layer].1,
                },
            };
            let (n, s) = tape.batchnorm(h, mlp[w + 2], mlp[w + 3], norm)?;
            stats.extend(s);
            h = tape.gelu(n)?;
        }
        h = tape.linear(h, mlp[8], mlp[9])?;
        let logits = tape.linear(h, mlp[10], mlp[11])?;
        Ok(ForwardPass { logits, stats })
    }

    /// Eval-mode logits for `batch` pairs of row-major `T×D` grids.
    pub fn logits(&self, grid1: &[f64], grid2: &[f64], batch: usize) -> Result<Vec<f64>> {
        let shape = vec![batch, self.config.tokens, self.config.depth];
        let mut tape = Tape::new();
        let params = self.bind_constant(&mut tape);
        let g1 = tape.constant(Tensor::new(shape.clone(), grid1.to_vec())?);
        let g2 = tape.constant(Tensor::new(shape, grid2.to_vec())?);
        let out = self.forward(&mut tape, &params, g1, g2, Mode::Eval)?;
        Ok(tape.value(out.logits)?.data().to_vec())
    }

    /// Eval-mode scores in `[0, 1]` for a batch of grid pairs.
    pub fn score_grids(&self, grid1: &[f64], grid2: &[f64], batch: usize) -> Result<Vec<f64>> {
        Ok(self.logits(grid1, grid2, batch)?.into_iter().map(sigmoid).collect())
    }

    /// Score of a single pair of `T×D` grids.
    pub fn forward_pair(&self, grid1: &[f32], grid2: &[f32]) -> Result<f64> {
        let widen = |g: &[f32]| g.iter().map(|&v| f64::from(v)).collect::<Vec<_>>();
        Ok(self.score_grids(&widen(grid1), &widen(grid2), 1)?[0])
    }

    /// Scores stored pairs in chunks of `chunk`.
    pub fn score_pairs(&self, store: &EmbeddingStore, pairs: &[PairSample], chunk: usize) -> Result<Vec<f64>> {
        let mut scores = Vec::with_capacity(pairs.len());
        for part in pairs.chunks(chunk.max(1)) {
            let (g1, g2) = gather(store, part)?;
            scores.extend(self.score_grids(&g1, &g2, part.len())?);
        }
        Ok(scores)
    }
}

/// Query and neighbor grids of `pairs`, each `pairs.len()×T×D`.
pub fn gather(store: &EmbeddingStore, pairs: &[PairSample]) -> Result<(Vec<f64>, Vec<f64>)> {
    let per = store.tokens() * store.depth();
    let mut g1 = Vec::with_capacity(pairs.len() * per);
    let mut g2 = Vec::with_capacity(pairs.len() * per);
    for p in pairs {
        g1.extend(store.get(p.split, p.query)?.grid().iter().map(|&v| f64::from(v)));
        g2.extend(store.get(Split::Train, p.neighbor)?.grid().iter().map(|&v| f64::from(v)));
    }
    Ok((g1, g2))
}
