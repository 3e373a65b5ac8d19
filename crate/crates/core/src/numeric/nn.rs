//! Composite layers built from graph primitives.

use super::graph::{Graph, Var};
use crate::error::TensorError;

/// `x W + b` with `W: [in, out]`, `b: [out]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

/// Multi-head `softmax(q kᵀ / √d_head) v` without masking. Inputs are
/// `[.., tokens, width]` with matching leading (batch) dimensions.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, TensorError> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    let r = sq.len();
    let ok = r >= 2
        && sk.len() == r
        && sv.len() == r
        && sq[..r - 2] == sk[..r - 2]
        && sk[..r - 1] == sv[..r - 1]
        && sq[r - 1] == sk[r - 1];
    if !ok {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: sq,
            rhs: sk,
        });
    }
    let batch = sq[..r - 2].to_vec();
    let (tq, d) = (sq[r - 2], sq[r - 1]);
    let (tk, dv) = (sk[r - 2], sv[r - 1]);
    if heads == 0 || d % heads != 0 || dv % heads != 0 {
        return Err(TensorError::InvalidArgument(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    if heads == 1 {
        let s = g.matmul_t(q, k)?;
        let s = g.scale(s, scale)?;
        let p = g.softmax(s)?;
        return g.matmul(p, v);
    }
    let b: usize = batch.iter().product();
    // [b, t, h, w] -> [b, h, t, w]
    let split = |g: &mut Graph, x: Var, t: usize, w: usize| -> Result<Var, TensorError> {
        let x = g.reshape(x, &[b, t, heads, w / heads])?;
        g.permute(x, &[0, 2, 1, 3])
    };
    let qh = split(g, q, tq, d)?;
    let kh = split(g, k, tk, d)?;
    let vh = split(g, v, tk, dv)?;
    let s = g.matmul_t(qh, kh)?;
    let s = g.scale(s, scale)?;
    let p = g.softmax(s)?;
    let o = g.matmul(p, vh)?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let mut out_shape = batch;
    out_shape.extend([tq, dv]);
    g.reshape(o, &out_shape)
}
