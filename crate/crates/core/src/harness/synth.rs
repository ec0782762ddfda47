//! Seeded synthetic videos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SpaError};
use crate::sequence::{AsrSentence, Frame, Video};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideoSpec {
    pub frames: usize,
    pub sentences: usize,
    pub l_v: usize,
    /// Inclusive range of tokens per sentence.
    pub l_s_min: usize,
    pub l_s_max: usize,
    pub d: usize,
    pub seed: u64,
    /// Seconds between consecutive frames.
    pub frame_step: f64,
    /// Shortest allowed sentence span, in seconds.
    pub min_sentence_seconds: f64,
}

impl SyntheticVideoSpec {
    pub fn new(frames: usize, sentences: usize, l_v: usize, d: usize, seed: u64) -> Self {
        Self {
            frames,
            sentences,
            l_v,
            l_s_min: 1,
            l_s_max: 4,
            d,
            seed,
            frame_step: 1.0,
            min_sentence_seconds: 0.1,
        }
    }

    pub fn duration(&self) -> f64 {
        self.frames as f64 * self.frame_step
    }

    fn check(&self) -> Result<()> {
        let infeasible = |m: String| Err(SpaError::InvalidInput(format!("infeasible video spec: {m}")));
        if self.frames == 0 || self.l_v == 0 || self.d == 0 {
            return infeasible("frames, l_v and d must be positive".into());
        }
        if self.l_s_min == 0 || self.l_s_min > self.l_s_max {
            return infeasible(format!("sentence length range {}..={}", self.l_s_min, self.l_s_max));
        }
        if !(self.frame_step.is_finite() && self.frame_step > 0.0) {
            return infeasible(format!("frame step {}", self.frame_step));
        }
        if !(self.min_sentence_seconds.is_finite() && self.min_sentence_seconds >= 0.0) {
            return infeasible(format!("minimum sentence length {}", self.min_sentence_seconds));
        }
        if self.sentences as f64 * self.min_sentence_seconds > self.duration() {
            return infeasible(format!(
                "{} sentences of at least {} s do not fit in {} s",
                self.sentences,
                self.min_sentence_seconds,
                self.duration()
            ));
        }
        Ok(())
    }
}

fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Frames at `i * frame_step`; sentence `j` lies inside the `j`-th of `M`
/// equal slots of the video duration, so spans never overlap.
pub fn generate<T: Scalar>(spec: &SyntheticVideoSpec) -> Result<Video<T>> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let frames = (0..spec.frames)
        .map(|i| Frame {
            index: i,
            time_seconds: i as f64 * spec.frame_step,
            vision_tokens: normal_tensor(&mut rng, vec![spec.l_v, spec.d]),
        })
        .collect();
    let slot = if spec.sentences == 0 {
        0.0
    } else {
        spec.duration() / spec.sentences as f64
    };
    let sentences = (0..spec.sentences)
        .map(|j| {
            let len = spec.min_sentence_seconds + rng.random::<f64>() * (slot - spec.min_sentence_seconds);
            let start = j as f64 * slot + rng.random::<f64>() * (slot - len);
            let tokens = rng.random_range(spec.l_s_min..=spec.l_s_max);
            AsrSentence {
                index: j + 1,
                start,
                end: (start + len).min((j + 1) as f64 * slot),
                tokens: normal_tensor(&mut rng, vec![tokens, spec.d]),
            }
        })
        .collect();
    Ok((frames, sentences))
}
