//! Event extraction: per-frame queries decoded against the scene-primed context.

use crate::compressor::{add_positions, replicate_queries};
use crate::config::EventMode;
use crate::error::{shape_err, Result};
use crate::params::{join, AttentionParams, FfnParams, Initializer, LayerNormParams, ParamGroup, Parameters};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct EventLayer<T: Scalar = f64> {
    pub self_norm: LayerNormParams<T>,
    pub self_attention: AttentionParams<T>,
    pub cross_norm: LayerNormParams<T>,
    pub cross_attention: AttentionParams<T>,
    pub ffn_norm: LayerNormParams<T>,
    pub ffn: FfnParams<T>,
}

#[derive(Clone, Debug)]
pub struct EventParams<T: Scalar = f64> {
    /// `[E, D]`, one parameter replicated for every frame.
    pub queries: Tensor<T>,
    pub query_norm: LayerNormParams<T>,
    /// Normalizes `V_i` before it joins the context (frame-conditioned mode).
    pub frame_norm: LayerNormParams<T>,
    pub layers: Vec<EventLayer<T>>,
    pub positional_encoding: bool,
}

impl<T: Scalar> EventParams<T> {
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
                Ok(EventLayer {
                    self_norm: LayerNormParams::new(d),
                    self_attention: AttentionParams::new(d, heads, bias, init)?,
                    cross_norm: LayerNormParams::new(d),
                    cross_attention: AttentionParams::new(d, heads, bias, init)?,
                    ffn_norm: LayerNormParams::new(d),
                    ffn: FfnParams::new(d, ffn_hidden, init)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            queries,
            query_norm: LayerNormParams::new(d),
            frame_norm: LayerNormParams::new(d),
            layers,
            positional_encoding: false,
        })
    }

    pub fn zero_branch_outputs(&mut self) {
        for layer in &mut self.layers {
            layer.self_attention.zero_output();
            layer.cross_attention.zero_output();
            layer.ffn.zero_output();
        }
    }

    /// `H_event` `[B, N, E, D]`.
    ///
    /// `vision` is `[B, N, L_v, D]`; it only enters the computation in
    /// frame-conditioned mode, where `frame_norm` is applied to it.
    pub fn apply(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        asr_fused: Var,
        scene: Var,
        vision: Var,
        mode: EventMode,
    ) -> Result<Var> {
        let a = tape.value(asr_fused)?.shape().to_vec();
        let s = tape.value(scene)?.shape().to_vec();
        let v = tape.value(vision)?.shape().to_vec();
        if a.len() != 3 || s.len() != 3 || v.len() != 4 || a[0] != s[0] || s[0] != v[0] || a[2] != s[2] || s[2] != v[3]
        {
            return Err(shape_err(
                "extract_events",
                format!("A_fused {a:?}, H_scene {s:?}, V {v:?}"),
            ));
        }
        let (b, n, lv, d) = (v[0], v[1], v[2], v[3]);
        let e = self.queries.shape()[0];
        if n == 0 {
            return tape.constant(Tensor::zeros(vec![b, 0, e, d]));
        }

        // one context per (batch, frame) pair, row b * N + i
        let shared = tape.concat(&[asr_fused, scene], 1)?;
        let shared = tape.repeat_interleave(shared, n)?;
        let mut context = match mode {
            EventMode::PaperLiteral => shared,
            EventMode::FrameConditioned => {
                let frames = self.frame_norm.apply(tape, &join(prefix, "frame_norm"), vision)?;
                let frames = tape.reshape(frames, &[b * n, lv, d])?;
                tape.concat(&[shared, frames], 1)?
            }
        };
        if self.positional_encoding {
            context = add_positions(tape, context)?;
        }

        let q = tape.param(&join(prefix, "queries"), ParamGroup::Queries, &self.queries)?;
        let q = replicate_queries(tape, q, b * n)?;
        let mut h = self.query_norm.apply(tape, &join(prefix, "query_norm"), q)?;
        for (i, layer) in self.layers.iter().enumerate() {
            let lp = join(prefix, &format!("layer{i}"));
            let normed = layer.self_norm.apply(tape, &join(&lp, "self_norm"), h)?;
            let attended = layer
                .self_attention
                .apply(tape, &join(&lp, "self_attention"), normed, normed)?;
            h = tape.add(h, attended)?;
            let normed = layer.cross_norm.apply(tape, &join(&lp, "cross_norm"), h)?;
            let attended = layer
                .cross_attention
                .apply(tape, &join(&lp, "cross_attention"), normed, context)?;
            h = tape.add(h, attended)?;
            let normed = layer.ffn_norm.apply(tape, &join(&lp, "ffn_norm"), h)?;
            let fed = layer.ffn.apply(tape, &join(&lp, "ffn"), normed)?;
            h = tape.add(h, fed)?;
        }
        tape.reshape(h, &[b, n, e, d])
    }
}

impl<T: Scalar> Parameters<T> for EventParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &Tensor<T>)) {
        f(&join(prefix, "queries"), ParamGroup::Queries, &self.queries);
        self.query_norm.visit(&join(prefix, "query_norm"), f);
        self.frame_norm.visit(&join(prefix, "frame_norm"), f);
        for (i, layer) in self.layers.iter().enumerate() {
            let lp = join(prefix, &format!("layer{i}"));
            layer.self_norm.visit(&join(&lp, "self_norm"), f);
            layer.self_attention.visit(&join(&lp, "self_attention"), f);
            layer.cross_norm.visit(&join(&lp, "cross_norm"), f);
            layer.cross_attention.visit(&join(&lp, "cross_attention"), f);
            layer.ffn_norm.visit(&join(&lp, "ffn_norm"), f);
            layer.ffn.visit(&join(&lp, "ffn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &mut Tensor<T>)) {
        f(&join(prefix, "queries"), ParamGroup::Queries, &mut self.queries);
        self.query_norm.visit_mut(&join(prefix, "query_norm"), f);
        self.frame_norm.visit_mut(&join(prefix, "frame_norm"), f);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let lp = join(prefix, &format!("layer{i}"));
            layer.self_norm.visit_mut(&join(&lp, "self_norm"), f);
            layer.self_attention.visit_mut(&join(&lp, "self_attention"), f);
            layer.cross_norm.visit_mut(&join(&lp, "cross_norm"), f);
            layer.cross_attention.visit_mut(&join(&lp, "cross_attention"), f);
            layer.ffn_norm.visit_mut(&join(&lp, "ffn_norm"), f);
            layer.ffn.visit_mut(&join(&lp, "ffn"), f);
        }
    }
}

/// Event tokens `[B, N, E, D]` for every frame of `vision: [B, N, L_v, D]`.
pub fn extract_events<T: Scalar>(
    asr_fused: &Tensor<T>,
    scene: &Tensor<T>,
    vision: &Tensor<T>,
    p: &EventParams<T>,
    mode: EventMode,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let a = tape.constant(asr_fused.clone())?;
    let s = tape.constant(scene.clone())?;
    let v = tape.constant(vision.clone())?;
    let h = p.apply(&mut tape, "event", a, s, v, mode)?;
    Ok(tape.value(h)?.clone())
}
