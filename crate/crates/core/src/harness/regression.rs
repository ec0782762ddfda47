//! Golden-file regression over a checked-in list of cases.
//!
//! The case list is an INI file; each section names one case and holds
//! compressor keys (as in the `[compressor]` config section) plus
//! `frames`, `sentences`, `video_seed` and `precision`.

// `!(x < tol)` is deliberate: NaN has to fail.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::config::CompressorConfig;
use crate::error::{Result, SpaError};
use crate::golden::{self, StoredTensor};
use crate::harness::synth::{generate, SyntheticVideoSpec};
use crate::model::SpaModel;
use crate::tensor::{Scalar, Tensor};

pub const TOLERANCE_F64: f64 = 1e-10;
pub const TOLERANCE_F32: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tolerance(&self) -> f64 {
        match self {
            Precision::F32 => TOLERANCE_F32,
            Precision::F64 => TOLERANCE_F64,
        }
    }
}

impl FromStr for Precision {
    type Err = SpaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(SpaError::InvalidInput(format!("precision `{other}` is not f32 or f64"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoldenCase {
    pub name: String,
    pub config: CompressorConfig,
    pub video: SyntheticVideoSpec,
    pub precision: Precision,
}

impl GoldenCase {
    pub fn file_name(&self) -> String {
        format!("{}.spat", self.name)
    }

    /// Recomputes the flattened output of this case.
    pub fn compute(&self) -> Result<StoredTensor> {
        fn run<T: Scalar>(case: &GoldenCase) -> Result<Tensor<T>> {
            let model = SpaModel::<T>::new(&case.config)?;
            let (frames, sentences) = generate::<T>(&case.video)?;
            Ok(model.forward(&frames, &sentences)?.into_flattened())
        }
        Ok(match self.precision {
            Precision::F32 => StoredTensor::F32(run(self)?),
            Precision::F64 => StoredTensor::F64(run(self)?),
        })
    }
}

pub fn parse_cases(text: &str) -> Result<Vec<GoldenCase>> {
    let doc = Ini::load_from_str(text).map_err(|e| SpaError::Config(e.to_string()))?;
    let mut cases = Vec::new();
    for (name, section) in doc.iter() {
        let Some(name) = name else {
            if section.iter().next().is_some() {
                return Err(SpaError::Config("golden case keys outside a section".into()));
            }
            continue;
        };
        let mut compressor = String::from("[compressor]\n");
        let (mut frames, mut sentences, mut video_seed) = (2usize, 1usize, 0u64);
        let mut precision = Precision::F64;
        for (key, value) in section.iter() {
            let parse_err = || SpaError::Config(format!("case {name}: bad value `{value}` for {key}"));
            match key {
                "frames" => frames = value.parse().map_err(|_| parse_err())?,
                "sentences" => sentences = value.parse().map_err(|_| parse_err())?,
                "video_seed" => video_seed = value.parse().map_err(|_| parse_err())?,
                "precision" => precision = value.parse()?,
                _ => compressor.push_str(&format!("{key} = {value}\n")),
            }
        }
        let config = CompressorConfig::from_ini_str(&compressor)
            .map_err(|e| SpaError::Config(format!("case {name}: {e}")))?;
        let video = SyntheticVideoSpec::new(frames, sentences, config.l_v, config.d, video_seed);
        cases.push(GoldenCase {
            name: name.to_string(),
            config,
            video,
            precision,
        });
    }
    Ok(cases)
}

pub fn load_cases(path: impl AsRef<Path>) -> Result<Vec<GoldenCase>> {
    parse_cases(&fs::read_to_string(path)?)
}

/// Writes one golden file per case into `dir`.
pub fn emit(cases: &[GoldenCase], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    cases
        .iter()
        .map(|case| {
            let path = dir.join(case.file_name());
            let bytes = match case.compute()? {
                StoredTensor::F32(t) => golden::encode(&t),
                StoredTensor::F64(t) => golden::encode(&t),
            };
            fs::write(&path, bytes)?;
            Ok(path)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Match { max_abs_diff: f64 },
    Mismatch {
        /// First divergent element.
        index: Vec<usize>,
        expected: f64,
        actual: f64,
    },
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },
    PrecisionMismatch { stored_width: usize },
    Missing(String),
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub outcome: Outcome,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        matches!(self.outcome, Outcome::Match { .. })
    }
}

impl fmt::Display for CaseResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.outcome {
            Outcome::Match { max_abs_diff } => write!(f, "{}: ok (max |diff| {max_abs_diff:.3e})", self.name),
            Outcome::Mismatch { index, expected, actual } => write!(
                f,
                "{}: MISMATCH at {index:?}: stored {expected:e}, recomputed {actual:e} (|diff| {:.3e})",
                self.name,
                (expected - actual).abs()
            ),
            Outcome::ShapeMismatch { expected, actual } => {
                write!(f, "{}: SHAPE stored {expected:?}, recomputed {actual:?}", self.name)
            }
            Outcome::PrecisionMismatch { stored_width } => {
                write!(f, "{}: PRECISION stored width {stored_width} differs from the case", self.name)
            }
            Outcome::Missing(why) => write!(f, "{}: MISSING ({why})", self.name),
        }
    }
}

/// Compares a stored tensor with a recomputed one, element by element.
pub fn compare(stored: &StoredTensor, actual: &StoredTensor, tolerance: f64) -> Outcome {
    fn walk<T: Scalar>(expected: &Tensor<T>, actual: &Tensor<T>, tolerance: f64) -> Outcome {
        if expected.shape() != actual.shape() {
            return Outcome::ShapeMismatch {
                expected: expected.shape().to_vec(),
                actual: actual.shape().to_vec(),
            };
        }
        let mut max_abs_diff: f64 = 0.0;
        for (k, (&e, &a)) in expected.data().iter().zip(actual.data()).enumerate() {
            let diff = (e.as_f64() - a.as_f64()).abs();
            if !(diff <= tolerance) {
                return Outcome::Mismatch {
                    index: expected.multi_index(k),
                    expected: e.as_f64(),
                    actual: a.as_f64(),
                };
            }
            max_abs_diff = max_abs_diff.max(diff);
        }
        Outcome::Match { max_abs_diff }
    }
    match (stored, actual) {
        (StoredTensor::F64(e), StoredTensor::F64(a)) => walk(e, a, tolerance),
        (StoredTensor::F32(e), StoredTensor::F32(a)) => walk(e, a, tolerance),
        (s, _) => Outcome::PrecisionMismatch { stored_width: s.width() },
    }
}

/// Recomputes every case and compares it with the file stored in `dir`.
pub fn verify(cases: &[GoldenCase], dir: impl AsRef<Path>) -> Result<Vec<CaseResult>> {
    let dir = dir.as_ref();
    cases
        .iter()
        .map(|case| {
            let path = dir.join(case.file_name());
            let outcome = match golden::read_tensor(&path) {
                Err(e) => Outcome::Missing(e.to_string()),
                Ok(stored) => compare(&stored, &case.compute()?, case.precision.tolerance()),
            };
            Ok(CaseResult {
                name: case.name.clone(),
                outcome,
            })
        })
        .collect()
}
