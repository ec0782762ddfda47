//! Scene aggregation: learnable queries over the fused ASR and vision tokens.

use crate::compressor::{add_positions, replicate_queries};
use crate::error::{shape_err, Result};
use crate::params::{join, AttentionParams, FfnParams, Initializer, LayerNormParams, ParamGroup, Parameters};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct SceneLayer<T: Scalar = f64> {
    pub attention_norm: LayerNormParams<T>,
    pub attention: AttentionParams<T>,
    pub ffn_norm: LayerNormParams<T>,
    pub ffn: FfnParams<T>,
}

#[derive(Clone, Debug)]
pub struct SceneParams<T: Scalar = f64> {
    /// `[S, D]`, shared across the batch.
    pub queries: Tensor<T>,
    pub query_norm: LayerNormParams<T>,
    pub layers: Vec<SceneLayer<T>>,
    pub positional_encoding: bool,
}

impl<T: Scalar> SceneParams<T> {
    pub fn new(
        d: usize,
        heads: usize,
        count: usize,
        layers: usize,
        ffn_hidden: usize,
        bias: bool,
        init: &mut Initializer,
    ) -> Result<Self> {
        let queries = init.uniform(vec![count, d], d);
        let layers = (0..layers)
            .map(|_| {
                Ok(SceneLayer {
                    attention_norm: LayerNormParams::new(d),
                    attention: AttentionParams::new(d, heads, bias, init)?,
                    ffn_norm: LayerNormParams::new(d),
                    ffn: FfnParams::new(d, ffn_hidden, init)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            queries,
            query_norm: LayerNormParams::new(d),
            layers,
            positional_encoding: false,
        })
    }

    pub fn zero_branch_outputs(&mut self) {
        for layer in &mut self.layers {
            layer.attention.zero_output();
            layer.ffn.zero_output();
        }
    }

    /// `H_scene` `[B, S, D]` from `A_fused: [B, L_a, D]` and `V_f: [B, N*L_v, D]`.
    pub fn apply(&self, tape: &mut Tape<T>, prefix: &str, asr_fused: Var, vision_flat: Var) -> Result<Var> {
        let a = tape.value(asr_fused)?.shape().to_vec();
        let v = tape.value(vision_flat)?.shape().to_vec();
        if a.len() != 3 || v.len() != 3 || a[0] != v[0] || a[2] != v[2] {
            return Err(shape_err("aggregate_scene", format!("A_fused {a:?} vs V_f {v:?}")));
        }
        let mut context = tape.concat(&[asr_fused, vision_flat], 1)?;
        if self.positional_encoding {
            context = add_positions(tape, context)?;
        }
        let q = tape.param(&join(prefix, "queries"), ParamGroup::Queries, &self.queries)?;
        let q = replicate_queries(tape, q, a[0])?;
        let mut h = self.query_norm.apply(tape, &join(prefix, "query_norm"), q)?;
        for (i, layer) in self.layers.iter().enumerate() {
            let lp = join(prefix, &format!("layer{i}"));
            let normed = layer.attention_norm.apply(tape, &join(&lp, "attention_norm"), h)?;
            let attended = layer.attention.apply(tape, &join(&lp, "attention"), normed, context)?;
            h = tape.add(h, attended)?;
            let normed = layer.ffn_norm.apply(tape, &join(&lp, "ffn_norm"), h)?;
            let fed = layer.ffn.apply(tape, &join(&lp, "ffn"), normed)?;
            h = tape.add(h, fed)?;
        }
        Ok(h)
    }
}

impl<T: Scalar> Parameters<T> for SceneParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &Tensor<T>)) {
        f(&join(prefix, "queries"), ParamGroup::Queries, &self.queries);
        self.query_norm.visit(&join(prefix, "query_norm"), f);
        for (i, layer) in self.layers.iter().enumerate() {
            let lp = join(prefix, &format!("layer{i}"));
            layer.attention_norm.visit(&join(&lp, "attention_norm"), f);
            layer.attention.visit(&join(&lp, "attention"), f);
            layer.ffn_norm.visit(&join(&lp, "ffn_norm"), f);
            layer.ffn.visit(&join(&lp, "ffn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &mut Tensor<T>)) {
        f(&join(prefix, "queries"), ParamGroup::Queries, &mut self.queries);
        self.query_norm.visit_mut(&join(prefix, "query_norm"), f);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let lp = join(prefix, &format!("layer{i}"));
            layer.attention_norm.visit_mut(&join(&lp, "attention_norm"), f);
            layer.attention.visit_mut(&join(&lp, "attention"), f);
            layer.ffn_norm.visit_mut(&join(&lp, "ffn_norm"), f);
            layer.ffn.visit_mut(&join(&lp, "ffn"), f);
        }
    }
}

/// Scene tokens `[B, S, D]`.
pub fn aggregate_scene<T: Scalar>(
    asr_fused: &Tensor<T>,
    vision_flat: &Tensor<T>,
    p: &SceneParams<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let a = tape.constant(asr_fused.clone())?;
    let v = tape.constant(vision_flat.clone())?;
    let h = p.apply(&mut tape, "scene", a, v)?;
    Ok(tape.value(h)?.clone())
}
