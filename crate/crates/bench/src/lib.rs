//! Shared fixtures for the criterion benches.

use spa_core::{Scalar, Tensor};

/// Deterministic, bounded filler so benches need no RNG.
pub fn filled<T: Scalar>(shape: &[usize], phase: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |i| T::lit((i as f64 * 0.7311 + phase).sin()))
}
