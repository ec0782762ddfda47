//! Toy compressor-only fitting loop.
//!
//! Inputs are fixed; the compressor is trained by plain gradient descent to
//! reproduce a target of the output's shape under mean squared error. Groups
//! listed as frozen (the time encoder by default) never change, which the
//! result proves with before/after digests.

use std::io::Write;

use sha2::{Digest, Sha256};

use crate::config::CompressorConfig;
use crate::error::{Result, SpaError};
use crate::harness::synth::{generate, SyntheticVideoSpec};
use crate::model::{PreparedVideo, SpaModel};
use crate::params::{ParamGroup, Parameters};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Teacher {
    /// Output of a compressor initialized from this seed (sharing the
    /// student's time encoder, so timestamp rows are reachable).
    Random { seed: u64 },
    /// The student's own initial output.
    SelfInitial,
}

#[derive(Clone, Debug)]
pub struct FitConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub teacher: Teacher,
    pub frozen: Vec<ParamGroup>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 0.05,
            teacher: Teacher::Random { seed: 0x7eac4e2 },
            frozen: vec![ParamGroup::TimeEncoder],
        }
    }
}

#[derive(Debug)]
pub struct FitResult {
    /// Loss before each update, then the loss after the last one
    /// (`steps + 1` entries).
    pub losses: Vec<f64>,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
    pub model: SpaModel<f64>,
}

impl FitResult {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one loss")
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["step", "loss"])?;
        for (step, loss) in self.losses.iter().enumerate() {
            w.write_record([step.to_string(), loss.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// SHA-256 over the names and little-endian values of the given groups.
pub fn group_digest(model: &SpaModel<f64>, groups: &[ParamGroup]) -> String {
    let mut hasher = Sha256::new();
    model.visit("", &mut |name, group, t| {
        if groups.contains(&group) {
            hasher.update(name.as_bytes());
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
    });
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn mse(output: &Tensor<f64>, target: &Tensor<f64>) -> (f64, Tensor<f64>) {
    let n = output.len() as f64;
    let diff = output.zip_with("mse", target, |a, b| a - b).expect("same shape");
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    (loss, diff.map(|d| 2.0 * d / n))
}

pub fn fit(config: &CompressorConfig, spec: &SyntheticVideoSpec, fit: &FitConfig) -> Result<FitResult> {
    if fit.steps == 0 {
        return Err(SpaError::InvalidInput("fit needs at least one step".into()));
    }
    if !(fit.learning_rate >= 0.0 && fit.learning_rate.is_finite()) {
        return Err(SpaError::InvalidInput(format!(
            "learning rate must be a finite non-negative number, got {}",
            fit.learning_rate
        )));
    }
    let mut model = SpaModel::<f64>::new(config)?;
    let (frames, sentences) = generate::<f64>(spec)?;
    let video = PreparedVideo::new(config, &frames, &sentences)?;

    let target = match fit.teacher {
        Teacher::SelfInitial => model.forward_prepared(&video)?.into_flattened(),
        Teacher::Random { seed } => {
            let mut teacher = SpaModel::<f64>::new(&CompressorConfig {
                seed,
                ..config.clone()
            })?;
            teacher.time_encoder = model.time_encoder.clone();
            teacher.forward_prepared(&video)?.into_flattened()
        }
    };

    let frozen_digest_before = group_digest(&model, &fit.frozen);
    let mut losses = Vec::with_capacity(fit.steps + 1);
    for step in 0..=fit.steps {
        let mut tape = Tape::with_frozen(fit.frozen.iter().copied());
        let trace = match model.record(&mut tape, &video) {
            // parameters overflowed on the previous update
            Err(SpaError::NonFinite { .. }) if step > 0 => {
                return Err(SpaError::Divergence { step, loss: f64::NAN })
            }
            other => other?,
        };
        let (loss, upstream) = mse(tape.value(trace.output)?, &target);
        if !loss.is_finite() {
            return Err(SpaError::Divergence { step, loss });
        }
        losses.push(loss);
        if step == fit.steps {
            break;
        }
        let grads = tape.backward(trace.output, &upstream)?.named();
        let lr = fit.learning_rate;
        model.visit_mut("", &mut |name, _, t| {
            if let Some(g) = grads.get(name) {
                for (p, &gv) in t.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * gv;
                }
            }
        });
    }
    let frozen_digest_after = group_digest(&model, &fit.frozen);
    Ok(FitResult {
        losses,
        frozen_digest_before,
        frozen_digest_after,
        model,
    })
}
