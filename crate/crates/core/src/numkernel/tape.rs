//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends one node holding its forward value. Nodes are
//! appended in execution order, so the tape is already topologically sorted
//! and [`Tape::backward`] is a single reverse sweep.
//!
//! Tensors with more than one axis are treated as `rows × features`, where
//! the features are the last axis. Token sequences are `batch × tokens × dim`.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, AttentionShape, BATCHNORM_EPS};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// How batch normalization obtains its statistics.
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with stored running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Statistics of one training batch, used to update running averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (`n − 1`) variance.
    pub var: Vec<f64>,
}

impl BatchStats {
    /// Exponential moving update of running statistics with momentum 0.1.
    pub fn update_running(&self, mean: &mut [f64], var: &mut [f64]) {
        let m = kernels::BATCHNORM_MOMENTUM;
        for (r, &b) in mean.iter_mut().zip(&self.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in var.iter_mut().zip(&self.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: usize, w: usize, b: usize },
    Add { a: usize, b: usize },
    AddBroadcast { x: usize, p: usize },
    PrependToken { token: usize, grid: usize },
    Token { x: usize, index: usize },
    ReplaceToken { x: usize, index: usize, token: usize },
    ConcatFeatures { a: usize, b: usize },
    MeanTokens { x: usize },
    Gelu { x: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, normalized: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Attention { q: usize, k: usize, v: usize, shape: AttentionShape, probs: Vec<f64> },
    BceWithLogits { logits: usize, labels: Vec<f64> },
    Sum { x: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of the operations of one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (parameter or input whose gradient is wanted).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.check(var)?].value)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "variable {} does not belong to tape {}",
                var.index, self.id
            )));
        }
        Ok(var.index)
    }

    fn node(&self, var: Var) -> Result<(usize, &Tensor)> {
        let i = self.check(var)?;
        Ok((i, &self.nodes[i].value))
    }

    fn needs(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// `x·W + b` applied to the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, xt) = self.node(x)?;
        let (wi, wt) = self.node(w)?;
        let (bi, bt) = self.node(b)?;
        if wt.shape().len() != 2 || xt.features() != wt.shape()[0] {
            return Err(Error::dim("linear", xt.shape(), wt.shape()));
        }
        let (inp, out) = (wt.shape()[0], wt.shape()[1]);
        if bt.len() != out {
            return Err(Error::dim("linear bias", wt.shape(), bt.shape()));
        }
        let y = kernels::linear_forward(xt.data(), wt.data(), bt.data(), xt.rows(), inp, out);
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let needs = self.needs(&[xi, wi, bi]);
        Ok(self.push(Tensor::new(shape, y)?, Op::Linear { x: xi, w: wi, b: bi }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, at) = self.node(a)?;
        let (bi, bt) = self.node(b)?;
        if at.shape() != bt.shape() {
            return Err(Error::dim("add", at.shape(), bt.shape()));
        }
        let y: Vec<f64> = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let shape = at.shape().to_vec();
        let needs = self.needs(&[ai, bi]);
        Ok(self.push(Tensor::new(shape, y)?, Op::Add { a: ai, b: bi }, needs))
    }

    /// Adds `p` to every leading slice of `x`; `p`'s shape must equal the trailing axes of `x`.
    pub fn add_broadcast(&mut self, x: Var, p: Var) -> Result<Var> {
        let (xi, xt) = self.node(x)?;
        let (pi, pt) = self.node(p)?;
        let xs = xt.shape();
        let ps = pt.shape();
        if ps.len() > xs.len() || xs[xs.len() - ps.len()..] != *ps {
            return Err(Error::dim("add_broadcast", xs, ps));
        }
        let pd = pt.data();
        let y: Vec<f64> = xt
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + pd[i % pd.len()])
            .collect();
        let shape = xs.to_vec();
        let needs = self.needs(&[xi, pi]);
        Ok(self.push(Tensor::new(shape, y)?, Op::AddBroadcast { x: xi, p: pi }, needs))
    }

    /// `[token ‖ grid]` along the token axis: `token` has `dim` elements, `grid` is `batch×t×dim`.
    pub fn prepend_token(&mut self, token: Var, grid: Var) -> Result<Var> {
        let (ti, tt) = self.node(token)?;
        let (gi, gt) = self.node(grid)?;
        let gs = gt.shape();
        if gs.len() != 3 || tt.len() != gs[2] {
            return Err(Error::dim("prepend_token", tt.shape(), gs));
        }
        let (b, t, d) = (gs[0], gs[1], gs[2]);
        let mut y = Vec::with_capacity(b * (t + 1) * d);
        for bi in 0..b {
            y.extend_from_slice(tt.data());
            y.extend_from_slice(&gt.data()[bi * t * d..(bi + 1) * t * d]);
        }
        let needs = self.needs(&[ti, gi]);
        Ok(self.push(Tensor::new(vec![b, t + 1, d], y)?, Op::PrependToken { token: ti, grid: gi }, needs))
    }

    /// Selects token `index` of a `batch×s×dim` sequence as `batch×1×dim`.
    pub fn token(&mut self, x: Var, index: usize) -> Result<Var> {
        let (xi, xt) = self.node(x)?;
        let xs = xt.shape();
        if xs.len() != 3 || index >= xs[1] {
            return Err(Error::dim("token", xs, &[index]));
        }
        let (b, s, d) = (xs[0], xs[1], xs[2]);
        let mut y = Vec::with_capacity(b * d);
        for bi in 0..b {
            y.extend_from_slice(&xt.data()[(bi * s + index) * d..][..d]);
        }
        let needs = self.needs(&[xi]);
        Ok(self.push(Tensor::new(vec![b, 1, d], y)?, Op::Token { x: xi, index }, needs))
    }

    /// Copy of `x` with token `index` replaced by `token` (`batch×1×dim`).
    pub fn replace_token(&mut self, x: Var, index: usize, token: Var) -> Result<Var> {
        let (xi, xt) = self.node(x)?;
        let (ti, tt) = self.node(token)?;
        let xs = xt.shape();
        if xs.len() != 3 || index >= xs[1] || tt.shape() != [xs[0], 1, xs[2]] {
            return Err(Error::dim("replace_token", xs, tt.shape()));
        }
        let (b, s, d) = (xs[0], xs[1], xs[2]);
        let mut y = xt.data().to_vec();
        for bi in 0..b {
            y[(bi * s + index) * d..][..d].copy_from_slice(&tt.data()[bi * d..(bi + 1) * d]);
        }
        let shape = xs.to_vec();
        let needs = self.needs(&[xi, ti]);
        Ok(self.push(Tensor::new(shape, y)?, Op::ReplaceToken { x: xi, index, token: ti }, needs))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_features(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, at) = self.node(a)?;
        let (bi, bt) = self.node(b)?;
        let (sa, sb) = (at.shape(), bt.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim("concat_features", sa, sb));
        }
        let (fa, fb) = (at.features(), bt.features());
        let mut y = Vec::with_capacity(at.len() + bt.len());
        for r in 0..at.rows() {
            y.extend_from_slice(&at.data()[r * fa..(r + 1) * fa]);
            y.extend_from_slice(&bt.data()[r * fb..(r + 1) * fb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = fa + fb;
        let needs = self.needs(&[ai, bi]);
        Ok(self.push(Tensor::new(shape, y)?, Op::ConcatFeatures { a: ai, b: bi }, needs))
    }

    /// Mean over the token axis of a `batch×s×dim` sequence, as `batch×1×dim`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let (xi, xt) = self.node(x)?;
        let xs = xt.shape();
        if xs.len() != 3 {
            return Err(Error::dim("mean_tokens", xs, &[3]));
        }
        let (b, s, d) = (xs[0], xs[1], xs[2]);
        let mut y = vec![0.0; b * d];
        for bi in 0..b {
            let row = &mut y[bi * d..(bi + 1) * d];
            for t in 0..s {
                for (o, &v) in row.iter_mut().zip(&xt.data()[(bi * s + t) * d..][..d]) {
                    *o += v;
                }
            }
            row.iter_mut().for_each(|o| *o /= s as f64);
        }
        let needs = self.needs(&[xi]);
        Ok(self.push(Tensor::new(vec![b, 1, d], y)?, Op::MeanTokens { x: xi }, needs))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (xi, xt) = self.node(x)?;
        let y = xt.data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = xt.shape().to_vec();
        let needs = self.needs(&[xi]);
        Ok(self.push(Tensor::new(shape, y)?, Op::Gelu { x: xi }, needs))
    }

    /// Batch normalization over the rows of `x` with affine `gamma`, `beta`.
    /// With [`NormStats::Batch`] the batch statistics are also returned.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, stats: NormStats<'_>) -> Result<(Var, Option<BatchStats>)> {
        let (xi, xt) = self.node(x)?;
        let (gi, gt) = self.node(gamma)?;
        let (bi, bt) = self.node(beta)?;
        let (rows, feats) = (xt.rows(), xt.features());
        if gt.len() != feats || bt.len() != feats {
            return Err(Error::dim("batchnorm", xt.shape(), gt.shape()));
        }
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                if rows < 2 {
                    return Err(Error::DegenerateBatch { rows });
                }
                let (m, v) = kernels::column_moments(xt.data(), rows, feats);
                (m, v, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != feats || var.len() != feats {
                    return Err(Error::dim("batchnorm running stats", &[feats], &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let mut normalized = Vec::with_capacity(xt.len());
        let mut y = Vec::with_capacity(xt.len());
        for r in 0..rows {
            for f in 0..feats {
                let h = (xt.data()[r * feats + f] - mean[f]) * inv_std[f];
                normalized.push(h);
                y.push(gt.data()[f] * h + bt.data()[f]);
            }
        }
        let out_stats = batch.then(|| {
            let correction = rows as f64 / (rows as f64 - 1.0);
            BatchStats {
                mean: mean.clone(),
                var: var.iter().map(|v| v * correction).collect(),
            }
        });
        let shape = xt.shape().to_vec();
        let needs = self.needs(&[xi, gi, bi]);
        let op = Op::BatchNorm {
            x: xi,
            gamma: gi,
            beta: bi,
            normalized,
            inv_std,
            batch_stats: batch,
        };
        Ok((self.push(Tensor::new(shape, y)?, op, needs), out_stats))
    }

    /// Multi-head scaled dot-product attention: `q` is `batch×sq×dim`, `k` and `v` are `batch×sk×dim`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qi, qt) = self.node(q)?;
        let (ki, kt) = self.node(k)?;
        let (vi, vt) = self.node(v)?;
        let (qs, ks) = (qt.shape(), kt.shape());
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || kt.shape() != vt.shape() {
            return Err(Error::dim("attention", qs, ks));
        }
        if heads == 0 || qs[2] % heads != 0 {
            return Err(Error::Config(format!("dimension {} is not divisible into {heads} heads", qs[2])));
        }
        let shape = AttentionShape {
            batch: qs[0],
            sq: qs[1],
            sk: ks[1],
            dim: qs[2],
            heads,
        };
        let (y, probs) = kernels::attention_forward(qt.data(), kt.data(), vt.data(), shape);
        let out_shape = qs.to_vec();
        let needs = self.needs(&[qi, ki, vi]);
        let op = Op::Attention {
            q: qi,
            k: ki,
            v: vi,
            shape,
            probs,
        };
        Ok(self.push(Tensor::new(out_shape, y)?, op, needs))
    }

    /// Attention probabilities recorded by an [`Tape::attention`] node, laid out `batch×heads×sq×sk`.
    pub fn attention_probs(&self, var: Var) -> Result<&[f64]> {
        match &self.nodes[self.check(var)?].op {
            Op::Attention { probs, .. } => Ok(probs),
            _ => Err(Error::Usage("not an attention node".into())),
        }
    }

    /// Mean binary cross-entropy of `logits` against `labels` in `{0, 1}`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let (oi, ot) = self.node(logits)?;
        if ot.len() != labels.len() {
            return Err(Error::dim("bce_with_logits", ot.shape(), &[labels.len()]));
        }
        let n = labels.len() as f64;
        let loss = ot
            .data()
            .iter()
            .zip(labels)
            .map(|(&o, &y)| kernels::bce_with_logits_term(o, y))
            .sum::<f64>()
            / n;
        let needs = self.needs(&[oi]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits: oi,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let (xi, xt) = self.node(x)?;
        let s = xt.data().iter().sum();
        let needs = self.needs(&[xi]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x: xi }, needs))
    }

    /// Reverse sweep from the scalar `loss`. Gradients are retained for leaves.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.check(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn accumulate<'g>(&self, grads: &'g mut [Option<Vec<f64>>], i: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[i].needs_grad {
            return None;
        }
        let len = self.nodes[i].value.len();
        Some(grads[i].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |j: usize| &self.nodes[j].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xt, wt) = (val(*x), val(*w));
                let (rows, inp, out) = (xt.rows(), wt.shape()[0], wt.shape()[1]);
                if let Some(dx) = self.accumulate(grads, *x) {
                    kernels::gemm(rows, out, inp, g, false, wt.data(), true, 1.0, dx);
                }
                if let Some(dw) = self.accumulate(grads, *w) {
                    kernels::gemm(inp, rows, out, xt.data(), true, g, false, 1.0, dw);
                }
                if let Some(db) = self.accumulate(grads, *b) {
                    for r in 0..rows {
                        for (d, &v) in db.iter_mut().zip(&g[r * out..(r + 1) * out]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for j in [*a, *b] {
                    if let Some(d) = self.accumulate(grads, j) {
                        add_into(d, g);
                    }
                }
            }
            Op::AddBroadcast { x, p } => {
                if let Some(dx) = self.accumulate(grads, *x) {
                    add_into(dx, g);
                }
                if let Some(dp) = self.accumulate(grads, *p) {
                    let n = dp.len();
                    for (k, &v) in g.iter().enumerate() {
                        dp[k % n] += v;
                    }
                }
            }
            Op::PrependToken { token, grid } => {
                let gs = val(*grid).shape();
                let (b, t, d) = (gs[0], gs[1], gs[2]);
                if let Some(dt) = self.accumulate(grads, *token) {
                    for bi in 0..b {
                        add_into(dt, &g[bi * (t + 1) * d..][..d]);
                    }
                }
                if let Some(dg) = self.accumulate(grads, *grid) {
                    for bi in 0..b {
                        add_into(&mut dg[bi * t * d..(bi + 1) * t * d], &g[(bi * (t + 1) + 1) * d..][..t * d]);
                    }
                }
            }
            Op::Token { x, index } => {
                let xs = val(*x).shape();
                let (b, s, d) = (xs[0], xs[1], xs[2]);
                if let Some(dx) = self.accumulate(grads, *x) {
                    for bi in 0..b {
                        add_into(&mut dx[(bi * s + index) * d..][..d], &g[bi * d..(bi + 1) * d]);
                    }
                }
            }
            Op::ReplaceToken { x, index, token } => {
                let xs = val(*x).shape();
                let (b, s, d) = (xs[0], xs[1], xs[2]);
                if let Some(dx) = self.accumulate(grads, *x) {
                    for bi in 0..b {
                        for t in (0..s).filter(|t| t != index) {
                            let o = (bi * s + t) * d;
                            add_into(&mut dx[o..o + d], &g[o..o + d]);
                        }
                    }
                }
                if let Some(dt) = self.accumulate(grads, *token) {
                    for bi in 0..b {
                        add_into(&mut dt[bi * d..(bi + 1) * d], &g[(bi * s + index) * d..][..d]);
                    }
                }
            }
            Op::ConcatFeatures { a, b } => {
                let (fa, fb) = (val(*a).features(), val(*b).features());
                let rows = val(*a).rows();
                if let Some(da) = self.accumulate(grads, *a) {
                    for r in 0..rows {
                        add_into(&mut da[r * fa..(r + 1) * fa], &g[r * (fa + fb)..][..fa]);
                    }
                }
                if let Some(db) = self.accumulate(grads, *b) {
                    for r in 0..rows {
                        add_into(&mut db[r * fb..(r + 1) * fb], &g[r * (fa + fb) + fa..][..fb]);
                    }
                }
            }
            Op::MeanTokens { x } => {
                let xs = val(*x).shape();
                let (b, s, d) = (xs[0], xs[1], xs[2]);
                if let Some(dx) = self.accumulate(grads, *x) {
                    let inv = 1.0 / s as f64;
                    for bi in 0..b {
                        for t in 0..s {
                            for k in 0..d {
                                dx[(bi * s + t) * d + k] += g[bi * d + k] * inv;
                            }
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xt = val(*x);
                if let Some(dx) = self.accumulate(grads, *x) {
                    for ((d, &v), &gv) in dx.iter_mut().zip(xt.data()).zip(g) {
                        *d += gv * kernels::gelu_grad(v);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let xt = val(*x);
                let (rows, feats) = (xt.rows(), xt.features());
                let gam = val(*gamma).data();
                if let Some(dg) = self.accumulate(grads, *gamma) {
                    for (k, (&gv, &h)) in g.iter().zip(normalized).enumerate() {
                        dg[k % feats] += gv * h;
                    }
                }
                if let Some(db) = self.accumulate(grads, *beta) {
                    for (k, &gv) in g.iter().enumerate() {
                        db[k % feats] += gv;
                    }
                }
                if let Some(dx) = self.accumulate(grads, *x) {
                    if *batch_stats {
                        let n = rows as f64;
                        let mut sum_dh = vec![0.0; feats];
                        let mut sum_dh_h = vec![0.0; feats];
                        for (k, (&gv, &h)) in g.iter().zip(normalized).enumerate() {
                            let dh = gv * gam[k % feats];
                            sum_dh[k % feats] += dh;
                            sum_dh_h[k % feats] += dh * h;
                        }
                        for (k, (&gv, &h)) in g.iter().zip(normalized).enumerate() {
                            let f = k % feats;
                            let dh = gv * gam[f];
                            dx[k] += inv_std[f] / n * (n * dh - sum_dh[f] - h * sum_dh_h[f]);
                        }
                    } else {
                        for (k, &gv) in g.iter().enumerate() {
                            let f = k % feats;
                            dx[k] += gv * gam[f] * inv_std[f];
                        }
                    }
                }
            }
            Op::Attention { q, k, v, shape, probs } => {
                let (qt, kt, vt) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0; qt.len()];
                let mut dk = vec![0.0; kt.len()];
                let mut dv = vec![0.0; vt.len()];
                kernels::attention_backward(qt.data(), kt.data(), vt.data(), probs, g, *shape, &mut dq, &mut dk, &mut dv);
                for (j, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(acc) = self.accumulate(grads, j) {
                        add_into(acc, &d);
                    }
                }
            }
            Op::BceWithLogits { logits, labels } => {
                let ot = val(*logits);
                let n = labels.len() as f64;
                if let Some(d) = self.accumulate(grads, *logits) {
                    for ((dv, &o), &y) in d.iter_mut().zip(ot.data()).zip(labels) {
                        *dv += g[0] * (kernels::sigmoid(o) - y) / n;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.accumulate(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf; exactly zero when the leaf
    /// did not influence the loss.
    pub fn get(&self, var: Var) -> Result<Tensor> {
        if var.tape != self.tape || var.index >= self.grads.len() {
            return Err(Error::Usage("variable is not on the differentiated tape".into()));
        }
        let shape = &self.shapes[var.index];
        match &self.grads[var.index] {
            Some(g) => Tensor::new(shape.clone(), g.clone()),
            None => Ok(Tensor::zeros(shape)),
        }
    }
}
