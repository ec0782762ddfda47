//! Hierarchical scene/event token compression for long-video multimodal
//! models.
//!
//! Frames and ASR sentences are interleaved at sentence granularity
//! ([`sequence`]), compressed by a four-stage query-bottleneck model
//! ([`compressor`], [`model`]) into `S` scene tokens plus `1 + E` tokens per
//! frame, and every stage is differentiable through a small reverse-mode
//! [`tape`]. The [`analytics`] module evaluates the closed-form compression
//! ratio; [`harness`] holds synthetic data, gradient checks, toy fitting and
//! golden-file regression.

pub mod analytics;
pub mod compressor;
pub mod config;
pub mod error;
pub mod golden;
pub mod harness;
pub mod kernels;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod params;
pub mod sequence;
pub mod tape;
pub mod tensor;
pub mod time_encoder;

pub use compressor::{
    aggregate_scene, assemble, extract_events, fuse_vision_asr, HierarchicalRepresentation,
};
pub use config::{CompressorConfig, EventMode};
pub use error::{Result, SpaError};
pub use model::{PreparedVideo, SpaModel};
pub use nn::{cross_attention, ffn, layer_norm, self_attention};
pub use params::{AttentionParams, FfnParams, LayerNormParams, ParamGroup, Parameters};
pub use sequence::{align_sentences, build_sequence, AsrSentence, Element, Frame, InterleavedSequence};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
pub use time_encoder::{encode_timestamp, TimeEncoderParams};
