//! The four compressor stages.
//!
//! * [`fusion`]: ASR tokens attend to the flattened, normalized vision tokens.
//! * [`scene`]: learnable scene queries aggregate `[A_fused, V_f]`.
//! * [`event`]: per-frame event queries, each layer self-attention, then
//!   cross-attention into `[A_fused, H_scene]` (plus `LN(V_i)` in
//!   frame-conditioned mode), then a feed-forward block.
//! * [`assembly`]: `[H_scene, T_1, H_event_1, ..., T_N, H_event_N]`.
//!
//! Every block is pre-norm with a residual connection.

pub mod assembly;
pub mod event;
pub mod fusion;
pub mod scene;

pub use assembly::{assemble, HierarchicalRepresentation};
pub use event::{extract_events, EventLayer, EventParams};
pub use fusion::{fuse_vision_asr, FusionParams};
pub use scene::{aggregate_scene, SceneLayer, SceneParams};

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Sinusoidal position codes `[rows, d]`.
pub(crate) fn sinusoidal_positions<T: Scalar>(rows: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(vec![rows, d], |flat| {
        let (pos, k) = ((flat / d) as f64, flat % d);
        let freq = 10_000f64.powf(-((k - k % 2) as f64) / d as f64);
        T::lit(if k % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() })
    })
}

/// Adds position codes along axis 1 of a `[G, L, D]` context.
pub(crate) fn add_positions<T: Scalar>(tape: &mut Tape<T>, context: Var) -> Result<Var> {
    let shape = tape.value(context)?.shape().to_vec();
    let codes = sinusoidal_positions::<T>(shape[1], shape[2])
        .into_reshaped(vec![1, shape[1], shape[2]])?
        .repeat_interleave(shape[0])?;
    let codes = tape.constant(codes)?;
    tape.add(context, codes)
}

/// Broadcasts a `[Q, D]` query parameter to `[groups, Q, D]`.
pub(crate) fn replicate_queries<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    groups: usize,
) -> Result<Var> {
    let shape = tape.value(queries)?.shape().to_vec();
    let q = tape.reshape(queries, &[1, shape[0], shape[1]])?;
    tape.repeat_interleave(q, groups)
}
