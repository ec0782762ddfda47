//! Central finite-difference verification of every model gradient.

// `!(x < tol)` is deliberate: NaN has to fail.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::CompressorConfig;
use crate::error::{Result, SpaError};
use crate::harness::synth::{generate, SyntheticVideoSpec};
use crate::model::{PreparedVideo, SpaModel};
use crate::params::{ParamGroup, Parameters};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Denominator floor of [`relative_error`]. Gradients smaller than this are
/// compared in absolute terms (`|a - n| < tolerance * floor`); attention key
/// biases, whose exact gradient is zero, land here.
pub const ABSOLUTE_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub tolerance: f64,
    pub step: f64,
    pub frozen: Vec<ParamGroup>,
    /// Seed of the fixed probe the output is contracted with.
    pub probe_seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: 1e-5,
            frozen: Vec::new(),
            probe_seed: 0x5eed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupStatus {
    Pass,
    Fail,
    Frozen,
}

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub group: ParamGroup,
    /// Scalar parameters checked.
    pub elements: usize,
    pub max_rel_error: f64,
    /// Parameter holding the worst element.
    pub worst: Option<String>,
    pub status: GroupStatus,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.status != GroupStatus::Fail)
    }

    pub fn group(&self, group: ParamGroup) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.group == group)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>9} {:>14}  {:<7} worst", "group", "elements", "max rel err", "status")?;
        for g in &self.groups {
            let status = match g.status {
                GroupStatus::Pass => "pass",
                GroupStatus::Fail => "FAIL",
                GroupStatus::Frozen => "frozen",
            };
            writeln!(
                f,
                "{:<14} {:>9} {:>14.3e}  {:<7} {}",
                g.group.as_str(),
                g.elements,
                g.max_rel_error,
                status,
                g.worst.as_deref().unwrap_or("-")
            )?;
        }
        write!(f, "tolerance {:e}: {}", self.tolerance, if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// `|a - n| / max(|a|, |n|, ABSOLUTE_FLOOR)`.
///
/// The floor keeps gradients that are zero up to rounding (both sides below
/// it) from producing huge ratios out of noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs()).max(ABSOLUTE_FLOOR)
    }
}

/// Fixed random contraction weights for the scalar loss `sum(probe * y)`.
pub fn probe(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..=1.0))
}

fn loss(model: &SpaModel<f64>, video: &PreparedVideo<f64>, probe: &Tensor<f64>) -> Result<f64> {
    Ok(model.forward_prepared(video)?.flattened().dot(probe))
}

/// Backpropagated gradient of `sum(probe * y)` for every parameter. Frozen
/// groups are absent; parameters the output does not reach are zero.
pub fn analytic_gradients(
    model: &SpaModel<f64>,
    video: &PreparedVideo<f64>,
    probe: &Tensor<f64>,
    frozen: &[ParamGroup],
) -> Result<HashMap<String, Tensor<f64>>> {
    let mut tape = Tape::with_frozen(frozen.iter().copied());
    let trace = model.record(&mut tape, video)?;
    let grads = tape.backward(trace.output, probe)?;
    let mut named = grads.named();
    model.visit("", &mut |name, group, t| {
        if !frozen.contains(&group) {
            named
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(t.shape().to_vec()));
        }
    });
    Ok(named)
}

/// Central differences `(L(p + h) - L(p - h)) / 2h`, one element at a time.
pub fn numeric_gradients(
    model: &mut SpaModel<f64>,
    video: &PreparedVideo<f64>,
    probe: &Tensor<f64>,
    step: f64,
    frozen: &[ParamGroup],
) -> Result<HashMap<String, Tensor<f64>>> {
    let mut targets = Vec::new();
    model.visit("", &mut |name, group, t| {
        if !frozen.contains(&group) {
            targets.push((name.to_string(), t.shape().to_vec()));
        }
    });
    let mut out = HashMap::new();
    for (name, shape) in targets {
        let mut grad = Tensor::zeros(shape);
        for k in 0..grad.len() {
            let nudge = |model: &mut SpaModel<f64>, delta: f64| {
                model.visit_mut("", &mut |n, _, t| {
                    if n == name {
                        t.data_mut()[k] += delta;
                    }
                });
            };
            let original = {
                let mut v = 0.0;
                model.visit("", &mut |n, _, t| {
                    if n == name {
                        v = t.data()[k];
                    }
                });
                v
            };
            nudge(model, step);
            let plus = loss(model, video, probe)?;
            nudge(model, -2.0 * step);
            let minus = loss(model, video, probe)?;
            model.visit_mut("", &mut |n, _, t| {
                if n == name {
                    t.data_mut()[k] = original;
                }
            });
            grad.data_mut()[k] = (plus - minus) / (2.0 * step);
        }
        out.insert(name, grad);
    }
    Ok(out)
}

/// Per-group comparison of two gradient maps.
pub fn compare_gradients(
    model: &SpaModel<f64>,
    analytic: &HashMap<String, Tensor<f64>>,
    numeric: &HashMap<String, Tensor<f64>>,
    frozen: &[ParamGroup],
    tolerance: f64,
) -> Result<GradcheckReport> {
    let mut groups: BTreeMap<ParamGroup, GroupReport> = BTreeMap::new();
    let mut missing = None;
    model.visit("", &mut |name, group, t| {
        let entry = groups.entry(group).or_insert_with(|| GroupReport {
            group,
            elements: 0,
            max_rel_error: 0.0,
            worst: None,
            status: if frozen.contains(&group) {
                GroupStatus::Frozen
            } else {
                GroupStatus::Pass
            },
        });
        entry.elements += t.len();
        if entry.status == GroupStatus::Frozen {
            return;
        }
        let (Some(a), Some(n)) = (analytic.get(name), numeric.get(name)) else {
            missing.get_or_insert_with(|| name.to_string());
            return;
        };
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let err = relative_error(av, nv);
            if err > entry.max_rel_error || err.is_nan() {
                entry.max_rel_error = err;
                entry.worst = Some(name.to_string());
            }
        }
        if !(entry.max_rel_error < tolerance) {
            entry.status = GroupStatus::Fail;
        }
    });
    if let Some(name) = missing {
        return Err(SpaError::InvalidInput(format!("no gradient for parameter `{name}`")));
    }
    Ok(GradcheckReport {
        tolerance,
        groups: groups.into_values().collect(),
    })
}

/// Gradient check of a freshly initialized f64 model on a synthetic video.
pub fn gradcheck(config: &CompressorConfig, spec: &SyntheticVideoSpec, options: &GradcheckOptions) -> Result<GradcheckReport> {
    if !(options.tolerance > 0.0) {
        return Err(SpaError::InvalidInput(format!("tolerance must be positive, got {}", options.tolerance)));
    }
    if !(options.step > 0.0) {
        return Err(SpaError::InvalidInput(format!("step must be positive, got {}", options.step)));
    }
    let mut model = SpaModel::<f64>::new(config)?;
    let (frames, sentences) = generate::<f64>(spec)?;
    let video = PreparedVideo::new(config, &frames, &sentences)?;
    let shape = [1, config.output_tokens(video.frame_count()), config.d];
    let probe = probe(&shape, options.probe_seed);
    let analytic = analytic_gradients(&model, &video, &probe, &options.frozen)?;
    let numeric = numeric_gradients(&mut model, &video, &probe, options.step, &options.frozen)?;
    compare_gradients(&model, &analytic, &numeric, &options.frozen, options.tolerance)
}
