//! Vision-to-ASR cross-modal fusion.

use crate::error::{shape_err, Result, SpaError};
use crate::params::{join, AttentionParams, FfnParams, Initializer, LayerNormParams, Parameters, ParamGroup};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct FusionParams<T: Scalar = f64> {
    pub asr_norm: LayerNormParams<T>,
    pub vision_norm: LayerNormParams<T>,
    pub attention: AttentionParams<T>,
    pub ffn_norm: LayerNormParams<T>,
    pub ffn: FfnParams<T>,
}

/// Tape handles produced by the fusion stage.
pub struct FusionOutput {
    /// `[B, L_a, D]`
    pub asr_fused: Var,
    /// `[B, N, L_v, D]`, layer-normalized vision tokens.
    pub vision_norm: Var,
    /// `[B, N * L_v, D]`, the same tokens flattened over frames.
    pub vision_flat: Var,
}

impl<T: Scalar> FusionParams<T> {
    pub fn new(d: usize, heads: usize, ffn_hidden: usize, bias: bool, init: &mut Initializer) -> Result<Self> {
        Ok(Self {
            asr_norm: LayerNormParams::new(d),
            vision_norm: LayerNormParams::new(d),
            attention: AttentionParams::new(d, heads, bias, init)?,
            ffn_norm: LayerNormParams::new(d),
            ffn: FfnParams::new(d, ffn_hidden, init)?,
        })
    }

    pub fn zero_branch_outputs(&mut self) {
        self.attention.zero_output();
        self.ffn.zero_output();
    }

    /// `LN(V)` and its flattening over the frame axis.
    pub fn normalize_vision(&self, tape: &mut Tape<T>, prefix: &str, vision: Var) -> Result<(Var, Var)> {
        let shape = tape.value(vision)?.shape().to_vec();
        if shape.len() != 4 {
            return Err(shape_err("fuse_vision_asr", format!("vision tokens {shape:?}, expected [B, N, L_v, D]")));
        }
        let (b, n, lv, d) = (shape[0], shape[1], shape[2], shape[3]);
        if n * lv == 0 {
            return Err(SpaError::InvalidInput("no visual context: N * L_v = 0".into()));
        }
        let norm = self.vision_norm.apply(tape, &join(prefix, "vision_norm"), vision)?;
        let flat = tape.reshape(norm, &[b, n * lv, d])?;
        Ok((norm, flat))
    }

    /// `A' = LN(A) + Attn(LN(A), V_f)`, `A_fused = A' + FFN(LN(A'))`.
    pub fn apply(&self, tape: &mut Tape<T>, prefix: &str, asr: Var, vision: Var) -> Result<FusionOutput> {
        let (vision_norm, vision_flat) = self.normalize_vision(tape, prefix, vision)?;
        let a_shape = tape.value(asr)?.shape().to_vec();
        let v_shape = tape.value(vision)?.shape().to_vec();
        if a_shape.len() != 3 || a_shape[0] != v_shape[0] || a_shape[2] != v_shape[3] {
            return Err(shape_err("fuse_vision_asr", format!("ASR {a_shape:?} vs vision {v_shape:?}")));
        }
        if a_shape[1] == 0 {
            return Err(SpaError::InvalidInput("fusion needs at least one ASR token".into()));
        }
        let a_bar = self.asr_norm.apply(tape, &join(prefix, "asr_norm"), asr)?;
        let attended = self
            .attention
            .apply(tape, &join(prefix, "attention"), a_bar, vision_flat)?;
        let a_prime = tape.add(a_bar, attended)?;
        let normed = self.ffn_norm.apply(tape, &join(prefix, "ffn_norm"), a_prime)?;
        let fed = self.ffn.apply(tape, &join(prefix, "ffn"), normed)?;
        let asr_fused = tape.add(a_prime, fed)?;
        Ok(FusionOutput {
            asr_fused,
            vision_norm,
            vision_flat,
        })
    }
}

impl<T: Scalar> Parameters<T> for FusionParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &Tensor<T>)) {
        self.asr_norm.visit(&join(prefix, "asr_norm"), f);
        self.vision_norm.visit(&join(prefix, "vision_norm"), f);
        self.attention.visit(&join(prefix, "attention"), f);
        self.ffn_norm.visit(&join(prefix, "ffn_norm"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &mut Tensor<T>)) {
        self.asr_norm.visit_mut(&join(prefix, "asr_norm"), f);
        self.vision_norm.visit_mut(&join(prefix, "vision_norm"), f);
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.ffn_norm.visit_mut(&join(prefix, "ffn_norm"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

/// Visually grounded ASR tokens for `a: [B, L_a, D]`, `v: [B, N, L_v, D]`.
pub fn fuse_vision_asr<T: Scalar>(a: &Tensor<T>, v: &Tensor<T>, p: &FusionParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone())?;
    let vv = tape.constant(v.clone())?;
    let out = p.apply(&mut tape, "fusion", av, vv)?;
    Ok(tape.value(out.asr_fused)?.clone())
}
