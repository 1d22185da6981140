//! Parameterized building blocks shared by the encoders and the decoder.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Var};
use crate::params::Session;

pub const LN_EPS: f64 = 1e-6;

/// `x[.., in] @ W[in, out] + b`.
pub fn linear<T: Scalar>(s: &mut Session<'_, '_, T>, x: Var, prefix: &str) -> Result<Var> {
    let w = s.param(&format!("{prefix}.weight"))?;
    let b = s.param(&format!("{prefix}.bias"))?;
    let y = s.graph.matmul(x, w)?;
    s.graph.add(y, b)
}

/// NCHW convolution, with bias when the store has `{prefix}.bias`.
pub fn conv2d<T: Scalar>(
    s: &mut Session<'_, '_, T>,
    x: Var,
    prefix: &str,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = s.param(&format!("{prefix}.weight"))?;
    let y = s.graph.conv2d(x, w, stride, pad)?;
    add_channel_bias(s, y, prefix)
}

pub fn conv_transpose2d<T: Scalar>(
    s: &mut Session<'_, '_, T>,
    x: Var,
    prefix: &str,
    stride: usize,
) -> Result<Var> {
    let w = s.param(&format!("{prefix}.weight"))?;
    let y = s.graph.conv_transpose2d(x, w, stride, 0)?;
    add_channel_bias(s, y, prefix)
}

fn add_channel_bias<T: Scalar>(s: &mut Session<'_, '_, T>, y: Var, prefix: &str) -> Result<Var> {
    let name = format!("{prefix}.bias");
    if !s.has_param(&name) {
        return Ok(y);
    }
    let b = s.param(&name)?;
    let c = s.graph.shape(b)[0];
    let b = s.graph.reshape(b, &[c, 1, 1])?;
    s.graph.add(y, b)
}

/// Layernorm over the last axis with `{prefix}.gain` / `{prefix}.bias`.
pub fn layernorm<T: Scalar>(s: &mut Session<'_, '_, T>, x: Var, prefix: &str) -> Result<Var> {
    let g = s.param(&format!("{prefix}.gain"))?;
    let b = s.param(&format!("{prefix}.bias"))?;
    s.graph.layernorm(x, g, b, T::of(LN_EPS))
}

/// Layernorm over the channel axis of an NCHW map.
pub fn layernorm2d<T: Scalar>(s: &mut Session<'_, '_, T>, x: Var, prefix: &str) -> Result<Var> {
    let nhwc = s.graph.permute(x, &[0, 2, 3, 1])?;
    let y = layernorm(s, nhwc, prefix)?;
    s.graph.permute(y, &[0, 3, 1, 2])
}

/// `[B,C,H,W]` -> `[B,H*W,C]`.
pub fn to_tokens<T: Scalar>(s: &mut Session<'_, '_, T>, x: Var) -> Result<Var> {
    let sh = s.graph.shape(x).to_vec();
    if sh.len() != 4 {
        return Err(Error::shape(format!("expected NCHW map, got {sh:?}")));
    }
    let flat = s.graph.reshape(x, &[sh[0], sh[1], sh[2] * sh[3]])?;
    s.graph.permute(flat, &[0, 2, 1])
}

/// `[B,H*W,C]` -> `[B,C,H,W]`.
pub fn from_tokens<T: Scalar>(s: &mut Session<'_, '_, T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let sh = s.graph.shape(x).to_vec();
    if sh.len() != 3 || sh[1] != h * w {
        return Err(Error::shape(format!("cannot fold {sh:?} into a {h}x{w} grid")));
    }
    let t = s.graph.permute(x, &[0, 2, 1])?;
    s.graph.reshape(t, &[sh[0], sh[2], h, w])
}

/// `[B,N,H*d]` -> `[B,H,N,d]`.
pub fn split_heads<T: Scalar>(s: &mut Session<'_, '_, T>, x: Var, heads: usize) -> Result<Var> {
    let sh = s.graph.shape(x).to_vec();
    if sh.len() != 3 || heads == 0 || sh[2] % heads != 0 {
        return Err(Error::shape(format!("cannot split {sh:?} into {heads} heads")));
    }
    let r = s.graph.reshape(x, &[sh[0], sh[1], heads, sh[2] / heads])?;
    s.graph.permute(r, &[0, 2, 1, 3])
}

/// `[B,H,N,d]` -> `[B,N,H*d]`.
pub fn merge_heads<T: Scalar>(s: &mut Session<'_, '_, T>, x: Var) -> Result<Var> {
    let sh = s.graph.shape(x).to_vec();
    let p = s.graph.permute(x, &[0, 2, 1, 3])?;
    s.graph.reshape(p, &[sh[0], sh[2], sh[1] * sh[3]])
}

/// `softmax(q k^T / sqrt(d)) v` over `[B,H,N,d]` operands.
pub fn scaled_dot_attention<T: Scalar>(
    s: &mut Session<'_, '_, T>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var> {
    let d = *s.graph.shape(q).last().unwrap();
    let kt = s.graph.transpose_last(k)?;
    let scores = s.graph.matmul(q, kt)?;
    let scores = s.graph.scale(scores, T::one() / T::of(d as f64).sqrt());
    let attn = s.graph.softmax_lastdim(scores)?;
    s.graph.matmul(attn, v)
}

/// Multi-head attention with separate q/k/v/out projections (`{prefix}.q` etc).
pub fn attention<T: Scalar>(
    s: &mut Session<'_, '_, T>,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    let q = linear(s, q_in, &format!("{prefix}.q"))?;
    let k = linear(s, k_in, &format!("{prefix}.k"))?;
    let v = linear(s, v_in, &format!("{prefix}.v"))?;
    let (q, k, v) = (
        split_heads(s, q, heads)?,
        split_heads(s, k, heads)?,
        split_heads(s, v, heads)?,
    );
    let o = scaled_dot_attention(s, q, k, v)?;
    let o = merge_heads(s, o)?;
    linear(s, o, &format!("{prefix}.out"))
}

/// Two-layer perceptron with GELU.
pub fn mlp<T: Scalar>(s: &mut Session<'_, '_, T>, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(s, x, &format!("{prefix}.fc1"))?;
    let h = s.graph.gelu(h);
    linear(s, h, &format!("{prefix}.fc2"))
}
