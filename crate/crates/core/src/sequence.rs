//! Sentence-level interleaving of timestamp, vision and ASR token blocks.
//!
//! Every frame contributes a timestamp token followed by its vision tokens.
//! Each ASR sentence is placed right after the block of its anchor frame,
//! the latest frame at or before the sentence's end time.

use std::collections::BTreeMap;

use crate::error::{Result, SpaError};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Frame<T: Scalar = f64> {
    /// 0-based position in the video.
    pub index: usize,
    pub time_seconds: f64,
    /// `[L_v, D]`
    pub vision_tokens: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct AsrSentence<T: Scalar = f64> {
    /// 1-based position in the transcript.
    pub index: usize,
    pub start: f64,
    pub end: f64,
    /// `[L_s, D]`
    pub tokens: Tensor<T>,
}

/// One block of the interleaved sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Element {
    Timestamp(usize),
    Vision(usize),
    Asr(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub element: Element,
    /// Token offset of the block within the sequence.
    pub offset: usize,
    /// Number of tokens in the block.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InterleavedSequence {
    segments: Vec<Segment>,
    total_length: usize,
}

impl InterleavedSequence {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn elements(&self) -> impl Iterator<Item = Element> + '_ {
        self.segments.iter().map(|s| s.element)
    }

    pub fn total_length(&self) -> usize {
        self.total_length
    }

    /// Concatenated ASR tokens `[L_a, D]`, in sequence order.
    pub fn asr_tokens<T: Scalar>(&self, sentences: &[AsrSentence<T>], d: usize) -> Result<Tensor<T>> {
        let parts: Vec<&Tensor<T>> = self
            .elements()
            .filter_map(|e| match e {
                Element::Asr(j) => Some(&sentences[j - 1].tokens),
                _ => None,
            })
            .collect();
        if parts.is_empty() {
            return Ok(Tensor::zeros(vec![0, d]));
        }
        Tensor::concat(&parts, 0)
    }

    /// Stacked vision tokens `[N, L_v, D]`, in sequence order.
    pub fn vision_tokens<T: Scalar>(&self, frames: &[Frame<T>], d: usize) -> Result<Tensor<T>> {
        let parts: Vec<&Tensor<T>> = self
            .elements()
            .filter_map(|e| match e {
                Element::Vision(i) => Some(&frames[i].vision_tokens),
                _ => None,
            })
            .collect();
        let lv = parts.first().map_or(0, |t| t.shape()[0]);
        if parts.is_empty() {
            return Ok(Tensor::zeros(vec![0, lv, d]));
        }
        Tensor::concat(&parts, 0)?.into_reshaped(vec![parts.len(), lv, d])
    }

    /// The full `[total_length, D]` token matrix, with `timestamps[i]` (a
    /// `[D]` embedding) standing in for frame `i`'s timestamp token.
    pub fn materialize<T: Scalar>(
        &self,
        frames: &[Frame<T>],
        sentences: &[AsrSentence<T>],
        timestamps: &[Tensor<T>],
    ) -> Result<Tensor<T>> {
        if timestamps.len() != frames.len() {
            return Err(SpaError::InvalidInput(format!(
                "{} timestamp embeddings for {} frames",
                timestamps.len(),
                frames.len()
            )));
        }
        let d = frames
            .first()
            .map(|f| f.vision_tokens.last_dim())
            .unwrap_or(0);
        let mut data = Vec::with_capacity(self.total_length * d);
        for seg in &self.segments {
            let block = match seg.element {
                Element::Timestamp(i) => &timestamps[i],
                Element::Vision(i) => &frames[i].vision_tokens,
                Element::Asr(j) => &sentences[j - 1].tokens,
            };
            if block.len() != seg.len * d {
                return Err(SpaError::InvalidInput(format!(
                    "block {:?} has {} values, expected {}",
                    seg.element,
                    block.len(),
                    seg.len * d
                )));
            }
            data.extend_from_slice(block.data());
        }
        Tensor::new(vec![self.total_length, d], data)
    }
}

/// Checks the frame and sentence invariants of one video.
/// Frames and sentences of one video.
pub type Video<T> = (Vec<Frame<T>>, Vec<AsrSentence<T>>);

pub fn validate_video<T: Scalar>(frames: &[Frame<T>], sentences: &[AsrSentence<T>]) -> Result<()> {
    let bad = |msg: String| Err(SpaError::InvalidInput(msg));
    let mut dim = None;
    let mut lv = None;
    for (pos, f) in frames.iter().enumerate() {
        if f.index != pos {
            return bad(format!("frame at position {pos} has index {}", f.index));
        }
        if !f.time_seconds.is_finite() || f.time_seconds < 0.0 {
            return bad(format!("frame {pos} has time {}", f.time_seconds));
        }
        if pos > 0 && f.time_seconds <= frames[pos - 1].time_seconds {
            return bad(format!("frame {pos} is not strictly after frame {}", pos - 1));
        }
        if f.vision_tokens.rank() != 2 || f.vision_tokens.shape()[0] == 0 {
            return bad(format!("frame {pos} tokens have shape {:?}", f.vision_tokens.shape()));
        }
        let (l, d) = (f.vision_tokens.shape()[0], f.vision_tokens.shape()[1]);
        if *lv.get_or_insert(l) != l || *dim.get_or_insert(d) != d {
            return bad(format!("frame {pos} tokens {:?} differ from frame 0", f.vision_tokens.shape()));
        }
    }
    for (pos, s) in sentences.iter().enumerate() {
        if s.index != pos + 1 {
            return bad(format!("sentence at position {pos} has index {}", s.index));
        }
        if !(s.start.is_finite() && s.end.is_finite()) || s.start < 0.0 || s.start > s.end {
            return bad(format!("sentence {} has span [{}, {}]", s.index, s.start, s.end));
        }
        if pos > 0 && s.start < sentences[pos - 1].end {
            return bad(format!("sentence {} overlaps sentence {}", s.index, s.index - 1));
        }
        if s.tokens.rank() != 2 || s.tokens.shape()[0] == 0 {
            return bad(format!("sentence {} tokens have shape {:?}", s.index, s.tokens.shape()));
        }
        let d = s.tokens.shape()[1];
        if *dim.get_or_insert(d) != d {
            return bad(format!("sentence {} has model dim {d}", s.index));
        }
    }
    Ok(())
}

/// Anchor frame of every sentence, keyed by 1-based sentence index.
///
/// The anchor is the latest frame whose time is at or before the sentence
/// end; sentences ending before the first frame anchor to frame 0.
pub fn align_sentences<T: Scalar>(
    frames: &[Frame<T>],
    sentences: &[AsrSentence<T>],
) -> Result<BTreeMap<usize, usize>> {
    if frames.is_empty() {
        return Err(SpaError::InvalidInput("cannot align sentences without frames".into()));
    }
    Ok(sentences
        .iter()
        .map(|s| {
            let at_or_before = frames.partition_point(|f| f.time_seconds <= s.end);
            (s.index, at_or_before.saturating_sub(1))
        })
        .collect())
}

pub fn build_sequence<T: Scalar>(
    frames: &[Frame<T>],
    sentences: &[AsrSentence<T>],
    anchors: &BTreeMap<usize, usize>,
) -> Result<InterleavedSequence> {
    let mut by_frame: Vec<Vec<&AsrSentence<T>>> = vec![Vec::new(); frames.len()];
    for s in sentences {
        let &anchor = anchors.get(&s.index).ok_or_else(|| {
            SpaError::InvalidInput(format!("sentence {} has no anchor", s.index))
        })?;
        by_frame
            .get_mut(anchor)
            .ok_or_else(|| {
                SpaError::InvalidInput(format!(
                    "sentence {} anchored to frame {anchor}, but only {} frames exist",
                    s.index,
                    frames.len()
                ))
            })?
            .push(s);
    }

    let mut segments = Vec::new();
    let mut offset = 0;
    let mut push = |element, len| {
        segments.push(Segment { element, offset, len });
        offset += len;
    };
    for (f, anchored) in frames.iter().zip(&by_frame) {
        push(Element::Timestamp(f.index), 1);
        push(Element::Vision(f.index), f.vision_tokens.shape()[0]);
        for s in anchored {
            push(Element::Asr(s.index), s.tokens.shape()[0]);
        }
    }
    Ok(InterleavedSequence {
        segments,
        total_length: offset,
    })
}
