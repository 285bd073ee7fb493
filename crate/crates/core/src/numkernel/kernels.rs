//! Raw forward/backward math on flat row-major buffers.
//!
//! Everything here is deterministic: loop orders are fixed and the matrix
//! products go through `matrixmultiply` (via `ndarray`) without threading.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

fn view(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("buffer matches shape")
}

/// `c = op(a) · op(b) + beta · c`, where `op(a)` is `m×k` and `op(b)` is `k×n`.
/// A transposed operand is stored in its untransposed layout.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    let a = if trans_a { view(a, k, m).reversed_axes() } else { view(a, m, k) };
    let b = if trans_b { view(b, n, k).reversed_axes() } else { view(b, k, n) };
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("buffer matches shape");
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}

/// `y = x·W + b` for `x: rows×inp`, `W: inp×out`.
pub fn linear_forward(x: &[f64], w: &[f64], b: &[f64], rows: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    gemm(rows, inp, out, x, false, w, false, 1.0, &mut y);
    y
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(o, 0) − o·y + ln(1 + e^{−|o|})`, the stable form of `−[y ln σ(o) + (1−y) ln(1−σ(o))]`.
pub fn bce_with_logits_term(o: f64, y: f64) -> f64 {
    o.max(0.0) - o * y + (-o.abs()).exp().ln_1p()
}

/// In-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Shapes for one scaled-dot-product attention call:
/// queries `batch×sq×dim`, keys and values `batch×sk×dim`, split into `heads`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub sq: usize,
    pub sk: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttentionShape {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn prob_index(&self, b: usize, h: usize, i: usize) -> usize {
        ((b * self.heads + h) * self.sq + i) * self.sk
    }
}

/// Returns the attended values and the attention probabilities, laid out
/// `batch×heads×sq×sk`.
pub fn attention_forward(q: &[f64], k: &[f64], v: &[f64], s: AttentionShape) -> (Vec<f64>, Vec<f64>) {
    let dh = s.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; s.batch * s.sq * s.dim];
    let mut probs = vec![0.0; s.batch * s.heads * s.sq * s.sk];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = h * dh;
            for i in 0..s.sq {
                let qi = &q[(b * s.sq + i) * s.dim + off..][..dh];
                let p0 = s.prob_index(b, h, i);
                let row = &mut probs[p0..p0 + s.sk];
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &k[(b * s.sk + j) * s.dim + off..][..dh];
                    *r = dot(qi, kj) * scale;
                }
                softmax_in_place(row);
                let oi = &mut out[(b * s.sq + i) * s.dim + off..][..dh];
                for (j, &p) in row.iter().enumerate() {
                    let vj = &v[(b * s.sk + j) * s.dim + off..][..dh];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Accumulates gradients of `attention_forward` into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    s: AttentionShape,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let dh = s.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; s.sk];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = h * dh;
            for i in 0..s.sq {
                let p0 = s.prob_index(b, h, i);
                let row = &probs[p0..p0 + s.sk];
                let doi = &dout[(b * s.sq + i) * s.dim + off..][..dh];
                for j in 0..s.sk {
                    let vi = (b * s.sk + j) * s.dim + off;
                    dp[j] = dot(doi, &v[vi..vi + dh]);
                    for (g, &d) in dv[vi..vi + dh].iter_mut().zip(doi) {
                        *g += row[j] * d;
                    }
                }
                let weighted: f64 = row.iter().zip(&dp).map(|(p, d)| p * d).sum();
                let qi = (b * s.sq + i) * s.dim + off;
                for j in 0..s.sk {
                    let ds = row[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = (b * s.sk + j) * s.dim + off;
                    for t in 0..dh {
                        dq[qi + t] += ds * k[kj + t];
                        dk[kj + t] += ds * q[qi + t];
                    }
                }
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-feature batch statistics: mean and biased variance over `rows`.
pub fn column_moments(x: &[f64], rows: usize, feats: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; feats];
    for r in 0..rows {
        for (m, &v) in mean.iter_mut().zip(&x[r * feats..(r + 1) * feats]) {
            *m += v;
        }
    }
    let n = rows as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; feats];
    for r in 0..rows {
        for ((s, &v), &m) in var.iter_mut().zip(&x[r * feats..(r + 1) * feats]).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}
