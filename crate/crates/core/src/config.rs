//! Compressor hyperparameters and their INI representation.

use std::fmt;
use std::str::FromStr;

use ini::Ini;

use crate::error::{Result, SpaError};

/// Which context the event queries attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EventMode {
    /// Context `[A_fused, H_scene]`, identical for every frame.
    PaperLiteral,
    /// Context `[A_fused, H_scene, LN(V_i)]` for frame `i`.
    FrameConditioned,
}

impl EventMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventMode::PaperLiteral => "paper-literal",
            EventMode::FrameConditioned => "frame-conditioned",
        }
    }
}

impl fmt::Display for EventMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventMode {
    type Err = SpaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-literal" => Ok(EventMode::PaperLiteral),
            "frame-conditioned" => Ok(EventMode::FrameConditioned),
            other => Err(SpaError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompressorConfig {
    /// Model dimension `D`.
    pub d: usize,
    pub heads: usize,
    /// Scene query count `S`.
    pub s: usize,
    /// Event queries per frame `E`.
    pub e: usize,
    /// Scene aggregator layers `L_s`.
    pub l_s: usize,
    /// Event extractor layers `L_e`.
    pub l_e: usize,
    /// Vision tokens per frame `L_v`.
    pub l_v: usize,
    pub mode: EventMode,
    pub seed: u64,
    /// Feed-forward hidden width; `4 * d` when unset.
    pub ffn_hidden: Option<usize>,
    pub attention_bias: bool,
    /// Adds sinusoidal position codes to the scene and event contexts.
    pub positional_encoding: bool,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 8,
            s: 64,
            e: 32,
            l_s: 2,
            l_e: 2,
            l_v: 16,
            mode: EventMode::FrameConditioned,
            seed: 0,
            ffn_hidden: None,
            attention_bias: true,
            positional_encoding: false,
        }
    }
}

const KEYS: [&str; 12] = [
    "d",
    "heads",
    "s",
    "e",
    "l_s",
    "l_e",
    "l_v",
    "mode",
    "seed",
    "ffn_hidden",
    "attention_bias",
    "positional_encoding",
];

impl CompressorConfig {
    /// The small configuration used for gradient checks and toy fitting.
    pub fn toy() -> Self {
        Self {
            d: 8,
            heads: 2,
            s: 2,
            e: 2,
            l_s: 1,
            l_e: 1,
            l_v: 2,
            ..Self::default()
        }
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.d)
    }

    /// Token count of the flattened output for `frames` frames.
    pub fn output_tokens(&self, frames: usize) -> usize {
        self.s + frames * (1 + self.e)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("heads", self.heads),
            ("s", self.s),
            ("e", self.e),
            ("l_s", self.l_s),
            ("l_e", self.l_e),
            ("l_v", self.l_v),
            ("ffn_hidden", self.ffn_width()),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(SpaError::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(SpaError::Config(format!(
                "d = {} is not divisible by heads = {}",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    /// Reads the `[compressor]` section of an INI document. Missing keys keep
    /// their defaults; unknown keys are rejected.
    pub fn from_ini_str(text: &str) -> Result<Self> {
        let doc = Ini::load_from_str(text).map_err(|e| SpaError::Config(e.to_string()))?;
        let section = doc
            .section(Some("compressor"))
            .ok_or_else(|| SpaError::Config("missing [compressor] section".into()))?;
        let mut cfg = Self::default();
        for (key, value) in section.iter() {
            let value = value.trim();
            let int = || -> Result<usize> {
                value
                    .parse()
                    .map_err(|_| SpaError::Config(format!("{key} = `{value}` is not an unsigned integer")))
            };
            let flag = || -> Result<bool> {
                value
                    .parse()
                    .map_err(|_| SpaError::Config(format!("{key} = `{value}` is not true/false")))
            };
            match key {
                "d" => cfg.d = int()?,
                "heads" => cfg.heads = int()?,
                "s" => cfg.s = int()?,
                "e" => cfg.e = int()?,
                "l_s" => cfg.l_s = int()?,
                "l_e" => cfg.l_e = int()?,
                "l_v" => cfg.l_v = int()?,
                "mode" => cfg.mode = value.parse()?,
                "seed" => {
                    cfg.seed = value
                        .parse()
                        .map_err(|_| SpaError::Config(format!("seed = `{value}` is not a u64")))?
                }
                "ffn_hidden" => cfg.ffn_hidden = Some(int()?),
                "attention_bias" => cfg.attention_bias = flag()?,
                "positional_encoding" => cfg.positional_encoding = flag()?,
                other => {
                    return Err(SpaError::Config(format!(
                        "unknown key `{other}` (expected one of {})",
                        KEYS.join(", ")
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_ini_string(&self) -> String {
        let mut out = String::from("[compressor]\n");
        let mut line = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        line("d", self.d.to_string());
        line("heads", self.heads.to_string());
        line("s", self.s.to_string());
        line("e", self.e.to_string());
        line("l_s", self.l_s.to_string());
        line("l_e", self.l_e.to_string());
        line("l_v", self.l_v.to_string());
        line("mode", self.mode.to_string());
        line("seed", self.seed.to_string());
        line("ffn_hidden", self.ffn_width().to_string());
        line("attention_bias", self.attention_bias.to_string());
        line("positional_encoding", self.positional_encoding.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_setting() {
        let c = CompressorConfig::default();
        assert_eq!((c.s, c.e, c.l_s, c.l_e), (64, 32, 2, 2));
        assert_eq!(c.output_tokens(144), 4816);
        assert_eq!(c.ffn_width(), 256);
    }

    #[test]
    fn ini_round_trip() {
        let mut c = CompressorConfig::toy();
        c.mode = EventMode::PaperLiteral;
        c.seed = 42;
        let back = CompressorConfig::from_ini_str(&c.to_ini_string()).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.mode, EventMode::PaperLiteral);
        assert_eq!(back.ffn_width(), c.ffn_width());
        assert_eq!((back.d, back.s, back.e), (8, 2, 2));
    }

    #[test]
    fn ini_errors() {
        assert!(matches!(
            CompressorConfig::from_ini_str("[compressor]\nmode = sideways\n"),
            Err(SpaError::UnknownMode(_))
        ));
        assert!(CompressorConfig::from_ini_str("[compressor]\nwidth = 3\n").is_err());
        assert!(CompressorConfig::from_ini_str("[other]\nd = 3\n").is_err());
        assert!(CompressorConfig::from_ini_str("[compressor]\nd = 10\nheads = 4\n").is_err());
        assert!(CompressorConfig::from_ini_str("[compressor]\ns = 0\n").is_err());
    }
}
