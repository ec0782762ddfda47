//! Verification and experimentation tooling around the compressor.

pub mod fit;
pub mod gradcheck;
pub mod regression;
pub mod synth;

pub use fit::{fit, FitConfig, FitResult, Teacher};
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport, GroupStatus};
pub use regression::{emit, verify, GoldenCase, Precision};
pub use synth::{generate, SyntheticVideoSpec};
