//! Plain-text video manifests.
//!
//! One record per line; blank lines and `#` comments are ignored. Tensor
//! paths are relative to the manifest's directory and may not contain
//! whitespace.
//!
//! ```text
//! frame    <index> <time_seconds> <tensor path>      # [L_v, D]
//! sentence <index> <t_start> <t_end> <tensor path>  # [L_s, D]
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, SpaError};
use crate::golden;
use crate::sequence::{validate_video, AsrSentence, Frame, Video};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub time_seconds: f64,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceRecord {
    pub index: usize,
    pub start: f64,
    pub end: f64,
    pub path: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VideoManifest {
    pub frames: Vec<FrameRecord>,
    pub sentences: Vec<SentenceRecord>,
}

impl VideoManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut manifest = VideoManifest::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| SpaError::Manifest {
                line: lineno + 1,
                message,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| -> Result<f64> {
                fields[i]
                    .parse::<f64>()
                    .map_err(|_| err(format!("`{}` is not a number", fields[i])))
            };
            let idx = |i: usize| -> Result<usize> {
                fields[i]
                    .parse::<usize>()
                    .map_err(|_| err(format!("`{}` is not an index", fields[i])))
            };
            match (fields[0], fields.len()) {
                ("frame", 4) => manifest.frames.push(FrameRecord {
                    index: idx(1)?,
                    time_seconds: num(2)?,
                    path: PathBuf::from(fields[3]),
                }),
                ("sentence", 5) => manifest.sentences.push(SentenceRecord {
                    index: idx(1)?,
                    start: num(2)?,
                    end: num(3)?,
                    path: PathBuf::from(fields[4]),
                }),
                ("frame", n) | ("sentence", n) => {
                    return Err(err(format!("`{}` record has {n} fields", fields[0])))
                }
                (other, _) => return Err(err(format!("unknown record type `{other}`"))),
            }
        }
        Ok(manifest)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# spa video manifest\n");
        for f in &self.frames {
            let _ = writeln!(out, "frame {} {} {}", f.index, f.time_seconds, f.path.display());
        }
        for s in &self.sentences {
            let _ = writeln!(out, "sentence {} {} {} {}", s.index, s.start, s.end, s.path.display());
        }
        out
    }
}

/// Loads a manifest and every tensor it references, converted to `T`.
pub fn load_video<T: Scalar>(manifest_path: impl AsRef<Path>) -> Result<Video<T>> {
    let manifest_path = manifest_path.as_ref();
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let manifest = VideoManifest::parse(&fs::read_to_string(manifest_path)?)?;
    let frames = manifest
        .frames
        .iter()
        .map(|r| {
            Ok(Frame {
                index: r.index,
                time_seconds: r.time_seconds,
                vision_tokens: golden::read_tensor(base.join(&r.path))?.into_tensor(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sentences = manifest
        .sentences
        .iter()
        .map(|r| {
            Ok(AsrSentence {
                index: r.index,
                start: r.start,
                end: r.end,
                tokens: golden::read_tensor(base.join(&r.path))?.into_tensor(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    validate_video(&frames, &sentences)?;
    Ok((frames, sentences))
}

/// Writes `video.txt` and one tensor file per frame and sentence into `dir`.
/// Returns the manifest path.
pub fn write_video<T: Scalar>(dir: impl AsRef<Path>, frames: &[Frame<T>], sentences: &[AsrSentence<T>]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = VideoManifest::default();
    for f in frames {
        let path = PathBuf::from(format!("frame_{:04}.spat", f.index));
        golden::write_tensor(dir.join(&path), &f.vision_tokens)?;
        manifest.frames.push(FrameRecord {
            index: f.index,
            time_seconds: f.time_seconds,
            path,
        });
    }
    for s in sentences {
        let path = PathBuf::from(format!("sentence_{:04}.spat", s.index));
        golden::write_tensor(dir.join(&path), &s.tokens)?;
        manifest.sentences.push(SentenceRecord {
            index: s.index,
            start: s.start,
            end: s.end,
            path,
        });
    }
    let manifest_path = dir.join("video.txt");
    fs::write(&manifest_path, manifest.render())?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let text = "# header\nframe 0 0 f0.spat\nframe 1 0.5 f1.spat  # trailing\n\nsentence 1 0.1 0.4 s1.spat\n";
        let m = VideoManifest::parse(text).unwrap();
        assert_eq!(m.frames.len(), 2);
        assert_eq!(m.frames[1].time_seconds, 0.5);
        assert_eq!(m.sentences[0].end, 0.4);
        assert_eq!(VideoManifest::parse(&m.render()).unwrap(), m);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match VideoManifest::parse("frame 0 0 a.spat\nframe 1 x b.spat\n") {
            Err(SpaError::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(VideoManifest::parse("clip 0 0 a\n").is_err());
        assert!(VideoManifest::parse("sentence 1 0 1\n").is_err());
    }
}
