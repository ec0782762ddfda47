//! Forward-only entry points for the building blocks.
//!
//! Each function records its computation on a scratch tape, so the values
//! are produced by exactly the same code path the differentiable model uses.

use crate::error::{shape_err, Result};
use crate::params::{AttentionParams, FfnParams, LayerNormParams};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

/// Layer normalization over the last axis.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, p: &LayerNormParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let y = p.apply(&mut tape, "ln", xv)?;
    Ok(tape.value(y)?.clone())
}

/// Multi-head cross-attention of `q: [B, Lq, D]` over `kv: [B, Lkv, D]`.
pub fn cross_attention<T: Scalar>(
    q: &Tensor<T>,
    kv: &Tensor<T>,
    p: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    cross_attention_with_weights(q, kv, p).map(|(out, _)| out)
}

/// As [`cross_attention`], also returning the softmax weights
/// `[B, heads, Lq, Lkv]`.
pub fn cross_attention_with_weights<T: Scalar>(
    q: &Tensor<T>,
    kv: &Tensor<T>,
    p: &AttentionParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if q.rank() != 3 || kv.rank() != 3 || q.shape()[0] != kv.shape()[0] {
        return Err(shape_err(
            "cross_attention",
            format!("q {:?} vs kv {:?}", q.shape(), kv.shape()),
        ));
    }
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone())?;
    let kvv = tape.constant(kv.clone())?;
    let (out, core) = p.apply_with_core(&mut tape, "attn", qv, kvv)?;
    Ok((tape.value(out)?.clone(), tape.attention_weights(core)?.clone()))
}

/// Unmasked multi-head self-attention over `x: [B, L, D]`.
pub fn self_attention<T: Scalar>(x: &Tensor<T>, p: &AttentionParams<T>) -> Result<Tensor<T>> {
    cross_attention(x, x, p)
}

/// Position-wise feed-forward block over the last axis.
pub fn ffn<T: Scalar>(x: &Tensor<T>, p: &FfnParams<T>) -> Result<Tensor<T>> {
    if x.last_dim() != p.dim() {
        return Err(shape_err(
            "ffn",
            format!("input {:?} for model dim {}", x.shape(), p.dim()),
        ));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let y = p.apply(&mut tape, "ffn", xv)?;
    Ok(tape.value(y)?.clone())
}
