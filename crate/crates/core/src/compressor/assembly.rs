//! Hierarchical token assembly: scene tokens, then one
//! `[timestamp, events...]` block per frame.

use crate::error::{shape_err, Result, SpaError};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Flattened compressor output `[B, S + N(1+E), D]` with its block layout.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalRepresentation<T: Scalar = f64> {
    scene_tokens: usize,
    event_tokens: usize,
    frames: usize,
    flattened: Tensor<T>,
}

/// A labelled token range of the flattened output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

impl<T: Scalar> HierarchicalRepresentation<T> {
    pub fn from_flattened(flattened: Tensor<T>, scene_tokens: usize, event_tokens: usize, frames: usize) -> Result<Self> {
        let expected = scene_tokens + frames * (1 + event_tokens);
        if flattened.rank() != 3 || flattened.shape()[1] != expected {
            return Err(shape_err(
                "HierarchicalRepresentation",
                format!("{:?} does not hold {expected} tokens", flattened.shape()),
            ));
        }
        Ok(Self {
            scene_tokens,
            event_tokens,
            frames,
            flattened,
        })
    }

    pub fn flattened(&self) -> &Tensor<T> {
        &self.flattened
    }

    pub fn into_flattened(self) -> Tensor<T> {
        self.flattened
    }

    pub fn token_count(&self) -> usize {
        self.flattened.shape()[1]
    }

    pub fn frame_count(&self) -> usize {
        self.frames
    }

    /// `[B, S, D]`
    pub fn scene_block(&self) -> Tensor<T> {
        self.flattened
            .slice(1, 0, self.scene_tokens)
            .expect("layout checked at construction")
    }

    /// `[B, 1 + E, D]` for frame `i`: the timestamp token, then the events.
    pub fn frame_block(&self, i: usize) -> Option<Tensor<T>> {
        (i < self.frames).then(|| {
            let width = 1 + self.event_tokens;
            self.flattened
                .slice(1, self.scene_tokens + i * width, width)
                .expect("layout checked at construction")
        })
    }

    pub fn frame_blocks(&self) -> Vec<Tensor<T>> {
        (0..self.frames).filter_map(|i| self.frame_block(i)).collect()
    }

    /// Token ranges of every block, in output order.
    pub fn blocks(&self) -> Vec<Block> {
        let mut out = vec![Block {
            label: "scene".into(),
            start: 0,
            end: self.scene_tokens,
        }];
        let width = 1 + self.event_tokens;
        for i in 0..self.frames {
            let start = self.scene_tokens + i * width;
            out.push(Block {
                label: format!("frame{i}.timestamp"),
                start,
                end: start + 1,
            });
            out.push(Block {
                label: format!("frame{i}.events"),
                start: start + 1,
                end: start + width,
            });
        }
        out
    }
}

/// Records the assembly of `scene: [B, S, D]`, `events: [B, N, E, D]` and
/// one `[D]` timestamp embedding per frame.
pub fn assemble_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    scene: Var,
    events: Var,
    timestamps: &[Var],
) -> Result<Var> {
    let s = tape.value(scene)?.shape().to_vec();
    let e = tape.value(events)?.shape().to_vec();
    if s.len() != 3 || e.len() != 4 || s[0] != e[0] || s[2] != e[3] {
        return Err(shape_err("assemble", format!("H_scene {s:?} vs H_event {e:?}")));
    }
    let (b, n, d) = (e[0], e[1], e[3]);
    if timestamps.len() != n {
        return Err(SpaError::InvalidInput(format!(
            "{} timestamp embeddings for {n} frames",
            timestamps.len()
        )));
    }
    if n == 0 {
        return Ok(scene);
    }
    let mut stamps = Vec::with_capacity(n);
    for &t in timestamps {
        if tape.value(t)?.shape() != [d] {
            return Err(shape_err("assemble", format!("timestamp {:?}, expected [{d}]", tape.value(t)?.shape())));
        }
        stamps.push(tape.reshape(t, &[1, 1, 1, d])?);
    }
    let stamps = tape.concat(&stamps, 1)?;
    let stamps = tape.repeat_interleave(stamps, b)?;
    let frames = tape.concat(&[stamps, events], 2)?;
    let frames = tape.reshape(frames, &[b, n * (1 + e[2]), d])?;
    tape.concat(&[scene, frames], 1)
}

pub fn assemble<T: Scalar>(
    scene: &Tensor<T>,
    events: &Tensor<T>,
    timestamps: &[Tensor<T>],
) -> Result<HierarchicalRepresentation<T>> {
    let mut tape = Tape::new();
    let s = tape.constant(scene.clone())?;
    let e = tape.constant(events.clone())?;
    let ts = timestamps
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = assemble_on_tape(&mut tape, s, e, &ts)?;
    let (scene_tokens, frames, event_tokens) = (scene.shape()[1], events.shape()[1], events.shape()[2]);
    HierarchicalRepresentation::from_flattened(tape.value(out)?.clone(), scene_tokens, event_tokens, frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_video_is_scene_block() {
        let scene = Tensor::from_fn(vec![1, 3, 2], |i| i as f64);
        let events = Tensor::zeros(vec![1, 0, 4, 2]);
        let rep = assemble(&scene, &events, &[]).unwrap();
        assert_eq!(rep.flattened(), &scene);
        assert_eq!(rep.blocks().len(), 1);
    }

    #[test]
    fn timestamp_count_must_match_frames() {
        let scene = Tensor::<f64>::zeros(vec![1, 1, 2]);
        let events = Tensor::zeros(vec![1, 2, 1, 2]);
        assert!(assemble(&scene, &events, &[Tensor::zeros(vec![2])]).is_err());
    }

    #[test]
    fn blocks_tile_the_output() {
        let scene = Tensor::<f64>::zeros(vec![1, 2, 2]);
        let events = Tensor::zeros(vec![1, 3, 4, 2]);
        let ts = vec![Tensor::full(vec![2], 1.0); 3];
        let rep = assemble(&scene, &events, &ts).unwrap();
        let blocks = rep.blocks();
        assert_eq!(blocks.last().unwrap().end, rep.token_count());
        for pair in blocks.windows(2) {
            assert_eq!(pair[0].end, pair[1].start);
        }
        assert_eq!(rep.frame_block(1).unwrap().data()[..2], [1.0, 1.0]);
        assert!(rep.frame_block(3).is_none());
    }
}
