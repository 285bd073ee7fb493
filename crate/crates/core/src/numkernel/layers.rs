//! Attention layers composed from tape primitives.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Tape handles of one attention layer's projections: query, key, value and
/// output, each a `dim×dim` weight plus bias.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttentionVars {
    /// Number of tensors in one attention layer, in the order of [`AttentionVars::from_slice`].
    pub const TENSORS: usize = 8;

    pub fn from_slice(v: &[Var]) -> Self {
        AttentionVars {
            wq: v[0],
            bq: v[1],
            wk: v[2],
            bk: v[3],
            wv: v[4],
            bv: v[5],
            wo: v[6],
            bo: v[7],
        }
    }
}

/// Multi-head self-attention over a `batch×tokens×dim` sequence, without residual.
pub fn mhsa(tape: &mut Tape, x: Var, p: &AttentionVars, heads: usize) -> Result<Var> {
    let q = tape.linear(x, p.wq, p.bq)?;
    let k = tape.linear(x, p.wk, p.bk)?;
    let v = tape.linear(x, p.wv, p.bv)?;
    let a = tape.attention(q, k, v, heads)?;
    tape.linear(a, p.wo, p.bo)
}

/// CLS-as-query token fusion between two branches with one shared parameter set.
///
/// The CLS token (index 0) of each branch queries every token of the other
/// branch; the attended value is projected and added to that CLS token. All
/// other tokens pass through unchanged.
pub fn cross_attention(tape: &mut Tape, y1: Var, y2: Var, p: &AttentionVars, heads: usize) -> Result<(Var, Var)> {
    let (s1, s2) = (tape.value(y1)?.shape().to_vec(), tape.value(y2)?.shape().to_vec());
    if s1 != s2 || s1.len() != 3 {
        return Err(Error::dim("cross_attention", &s1, &s2));
    }
    let k1 = tape.linear(y1, p.wk, p.bk)?;
    let v1 = tape.linear(y1, p.wv, p.bv)?;
    let k2 = tape.linear(y2, p.wk, p.bk)?;
    let v2 = tape.linear(y2, p.wv, p.bv)?;
    let z1 = fuse_cls(tape, y1, k2, v2, p, heads)?;
    let z2 = fuse_cls(tape, y2, k1, v1, p, heads)?;
    Ok((z1, z2))
}

fn fuse_cls(tape: &mut Tape, own: Var, keys: Var, values: Var, p: &AttentionVars, heads: usize) -> Result<Var> {
    let cls = tape.token(own, 0)?;
    let q = tape.linear(cls, p.wq, p.bq)?;
    let a = tape.attention(q, keys, values, heads)?;
    let o = tape.linear(a, p.wo, p.bo)?;
    let fused = tape.add(cls, o)?;
    tape.replace_token(own, 0, fused)
}
