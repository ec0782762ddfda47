//! End-to-end compressor: interleaved input in, hierarchical tokens out.

use crate::compressor::assembly::assemble_on_tape;
use crate::compressor::{EventParams, FusionParams, HierarchicalRepresentation, SceneParams};
use crate::config::CompressorConfig;
use crate::error::{Result, SpaError};
use crate::params::{Initializer, ParamGroup, Parameters};
use crate::sequence::{align_sentences, build_sequence, validate_video, AsrSentence, Frame, InterleavedSequence};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::time_encoder::TimeEncoderParams;

/// One video, validated and split into compressor inputs.
#[derive(Clone, Debug)]
pub struct PreparedVideo<T: Scalar = f64> {
    pub sequence: InterleavedSequence,
    /// `[1, L_a, D]`
    pub asr: Tensor<T>,
    /// `[1, N, L_v, D]`
    pub vision: Tensor<T>,
    pub frame_times: Vec<f64>,
}

impl<T: Scalar> PreparedVideo<T> {
    pub fn new(config: &CompressorConfig, frames: &[Frame<T>], sentences: &[AsrSentence<T>]) -> Result<Self> {
        validate_video(frames, sentences)?;
        let anchors = align_sentences(frames, sentences)?;
        let sequence = build_sequence(frames, sentences, &anchors)?;
        let d = config.d;
        if let Some(f) = frames.iter().find(|f| f.vision_tokens.shape() != [config.l_v, d]) {
            return Err(SpaError::InvalidInput(format!(
                "frame {} tokens {:?}, config expects [{}, {d}]",
                f.index,
                f.vision_tokens.shape(),
                config.l_v
            )));
        }
        if let Some(s) = sentences.iter().find(|s| s.tokens.last_dim() != d) {
            return Err(SpaError::InvalidInput(format!(
                "sentence {} tokens {:?}, config expects model dim {d}",
                s.index,
                s.tokens.shape()
            )));
        }
        let asr = sequence.asr_tokens(sentences, d)?;
        let asr_len = asr.shape()[0];
        let asr = asr.into_reshaped(vec![1, asr_len, d])?;
        let vision = sequence.vision_tokens(frames, d)?;
        let vision = vision.into_reshaped(vec![1, frames.len(), config.l_v, d])?;
        Ok(Self {
            sequence,
            asr,
            vision,
            frame_times: frames.iter().map(|f| f.time_seconds).collect(),
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frame_times.len()
    }
}

/// Tape handles of one recorded forward pass.
pub struct ForwardTrace {
    /// `[1, S + N(1+E), D]`
    pub output: Var,
    pub asr_fused: Var,
    pub scene: Var,
    pub events: Var,
    pub timestamps: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct SpaModel<T: Scalar = f64> {
    pub config: CompressorConfig,
    pub fusion: FusionParams<T>,
    pub scene: SceneParams<T>,
    pub event: EventParams<T>,
    pub time_encoder: TimeEncoderParams<T>,
}

impl<T: Scalar> SpaModel<T> {
    /// Seeded initialization; the same config always yields the same weights.
    pub fn new(config: &CompressorConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut init = Initializer::new(c.seed);
        let hidden = c.ffn_width();
        let fusion = FusionParams::new(c.d, c.heads, hidden, c.attention_bias, &mut init)?;
        let mut scene = SceneParams::new(c.d, c.heads, c.s, c.l_s, hidden, c.attention_bias, &mut init)?;
        let mut event = EventParams::new(c.d, c.heads, c.e, c.l_e, hidden, c.attention_bias, &mut init)?;
        scene.positional_encoding = c.positional_encoding;
        event.positional_encoding = c.positional_encoding;
        let time_encoder = TimeEncoderParams::new(c.d, &mut init)?;
        Ok(Self {
            config: config.clone(),
            fusion,
            scene,
            event,
            time_encoder,
        })
    }

    /// Zeroes every attention output projection and every second
    /// feed-forward layer, leaving only the residual paths.
    pub fn zero_branch_outputs(&mut self) {
        self.fusion.zero_branch_outputs();
        self.scene.zero_branch_outputs();
        self.event.zero_branch_outputs();
    }

    pub fn record(&self, tape: &mut Tape<T>, video: &PreparedVideo<T>) -> Result<ForwardTrace> {
        let d = self.config.d;
        let asr = tape.constant(video.asr.clone())?;
        let vision = tape.constant(video.vision.clone())?;

        let (asr_fused, vision_flat) = if video.asr.shape()[1] == 0 {
            // no speech: nothing to fuse, the contexts carry vision tokens only
            let (_, flat) = self.fusion.normalize_vision(tape, "fusion", vision)?;
            (tape.constant(Tensor::zeros(vec![1, 0, d]))?, flat)
        } else {
            let out = self.fusion.apply(tape, "fusion", asr, vision)?;
            (out.asr_fused, out.vision_flat)
        };

        let scene = self.scene.apply(tape, "scene", asr_fused, vision_flat)?;
        let events = self
            .event
            .apply(tape, "event", asr_fused, scene, vision, self.config.mode)?;
        let timestamps = video
            .frame_times
            .iter()
            .map(|&t| self.time_encoder.apply(tape, "time", t))
            .collect::<Result<Vec<_>>>()?;
        let output = assemble_on_tape(tape, scene, events, &timestamps)?;
        Ok(ForwardTrace {
            output,
            asr_fused,
            scene,
            events,
            timestamps,
        })
    }

    pub fn forward_prepared(&self, video: &PreparedVideo<T>) -> Result<HierarchicalRepresentation<T>> {
        let mut tape = Tape::with_frozen(ParamGroup::ALL);
        let trace = self.record(&mut tape, video)?;
        let flat = tape.value(trace.output)?.clone();
        HierarchicalRepresentation::from_flattened(flat, self.config.s, self.config.e, video.frame_count())
    }

    pub fn forward(&self, frames: &[Frame<T>], sentences: &[AsrSentence<T>]) -> Result<HierarchicalRepresentation<T>> {
        let video = PreparedVideo::new(&self.config, frames, sentences)?;
        self.forward_prepared(&video)
    }
}

impl<T: Scalar> Parameters<T> for SpaModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &Tensor<T>)) {
        use crate::params::join;
        self.fusion.visit(&join(prefix, "fusion"), f);
        self.scene.visit(&join(prefix, "scene"), f);
        self.event.visit(&join(prefix, "event"), f);
        self.time_encoder.visit(&join(prefix, "time"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &mut Tensor<T>)) {
        use crate::params::join;
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        self.scene.visit_mut(&join(prefix, "scene"), f);
        self.event.visit_mut(&join(prefix, "event"), f);
        self.time_encoder.visit_mut(&join(prefix, "time"), f);
    }
}
