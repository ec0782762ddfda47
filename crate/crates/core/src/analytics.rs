//! Closed-form compression ratio of the scene/event token layout.
//!
//! Per ASR segment the compressor emits `S + N * E` tokens in place of
//! `N * D_v` visual tokens, where `N` is the mean number of frames per
//! sentence:
//!
//! ```text
//! ratio     = (S + N * E) / (N * D_v) = (S / N + E) / D_v
//! reduction = (1 - ratio) * 100
//! ```

use std::fmt::Write as _;
use std::io::Write;

use crate::error::{Result, SpaError};

/// Mean frames per ASR sentence measured on the reference corpus.
pub const DEFAULT_FRAMES_PER_SENTENCE: f64 = 1.836;
/// Visual tokens per frame of the reference vision encoder.
pub const DEFAULT_VISUAL_TOKENS: f64 = 384.0;
/// Allowed gap, in percentage points, between a computed and a published
/// reduction before the row is flagged.
pub const PUBLISHED_TOLERANCE_PP: f64 = 0.02;

/// Published `(S, E, reduction %)` ablation settings.
pub const PUBLISHED_REDUCTIONS: [(usize, usize, f64); 7] = [
    (8, 32, 93.38),
    (16, 32, 89.4),
    (32, 32, 87.13),
    (64, 32, 82.59),
    (64, 8, 88.84),
    (64, 16, 86.76),
    (64, 64, 74.26),
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatioInput {
    pub s: f64,
    pub e: f64,
    /// Mean frames per ASR sentence.
    pub n_avg: f64,
    /// Original visual tokens per frame.
    pub d_v: f64,
}

impl RatioInput {
    pub fn new(s: f64, e: f64) -> Self {
        Self {
            s,
            e,
            n_avg: DEFAULT_FRAMES_PER_SENTENCE,
            d_v: DEFAULT_VISUAL_TOKENS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompressionReport {
    pub input: RatioInput,
    pub ratio: f64,
    pub reduction_percent: f64,
}

impl CompressionReport {
    pub fn display_ratio(&self) -> String {
        format!("{:.4}", self.ratio)
    }

    pub fn display_reduction(&self) -> String {
        format!("{:.2}%", self.reduction_percent)
    }
}

pub fn compression_ratio(input: RatioInput) -> Result<CompressionReport> {
    let fields = [("S", input.s), ("E", input.e), ("N", input.n_avg), ("D_v", input.d_v)];
    for (name, v) in fields {
        if !(v.is_finite() && v > 0.0) {
            return Err(SpaError::InvalidInput(format!("{name} must be positive, got {v}")));
        }
    }
    let ratio = (input.s + input.n_avg * input.e) / (input.n_avg * input.d_v);
    Ok(CompressionReport {
        input,
        ratio,
        reduction_percent: (1.0 - ratio) * 100.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PublishedCheck {
    /// No published figure for this setting.
    Unpublished,
    Consistent,
    /// The published figure disagrees with the formula.
    Inconsistent,
}

impl PublishedCheck {
    pub fn as_str(&self) -> &'static str {
        match self {
            PublishedCheck::Unpublished => "-",
            PublishedCheck::Consistent => "ok",
            PublishedCheck::Inconsistent => "INCONSISTENT",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub report: CompressionReport,
    pub published: Option<f64>,
    pub check: PublishedCheck,
}

fn published_reduction(input: &RatioInput) -> Option<f64> {
    let reference = input.n_avg == DEFAULT_FRAMES_PER_SENTENCE && input.d_v == DEFAULT_VISUAL_TOKENS;
    if !reference {
        return None;
    }
    PUBLISHED_REDUCTIONS
        .iter()
        .find(|(s, e, _)| *s as f64 == input.s && *e as f64 == input.e)
        .map(|&(_, _, pct)| pct)
}

fn sweep_row(input: RatioInput) -> Result<SweepRow> {
    let report = compression_ratio(input)?;
    let published = published_reduction(&input);
    let check = match published {
        None => PublishedCheck::Unpublished,
        Some(p) if (p - report.reduction_percent).abs() <= PUBLISHED_TOLERANCE_PP => PublishedCheck::Consistent,
        Some(_) => PublishedCheck::Inconsistent,
    };
    Ok(SweepRow { report, published, check })
}

/// One report per `(S, E)` pair of the grid, S-major.
pub fn sweep(s_values: &[usize], e_values: &[usize], n_avg: f64, d_v: f64) -> Result<Vec<SweepRow>> {
    if s_values.is_empty() || e_values.is_empty() {
        return Err(SpaError::InvalidInput("sweep grid is empty".into()));
    }
    s_values
        .iter()
        .flat_map(|&s| e_values.iter().map(move |&e| (s, e)))
        .map(|(s, e)| {
            sweep_row(RatioInput {
                s: s as f64,
                e: e as f64,
                n_avg,
                d_v,
            })
        })
        .collect()
}

/// The seven published settings, in publication order.
pub fn published_sweep() -> Result<Vec<SweepRow>> {
    PUBLISHED_REDUCTIONS
        .iter()
        .map(|&(s, e, _)| sweep_row(RatioInput::new(s as f64, e as f64)))
        .collect()
}

/// Parses `"8,16,32x32,64"` (or with `×`) into S and E lists.
pub fn parse_grid(spec: &str) -> Result<(Vec<usize>, Vec<usize>)> {
    let bad = || SpaError::InvalidInput(format!("grid `{spec}` is not of the form s1,s2,...xe1,e2,..."));
    let (s, e) = spec
        .split_once('×')
        .or_else(|| spec.split_once(['x', 'X']))
        .ok_or_else(bad)?;
    let list = |part: &str| -> Result<Vec<usize>> {
        part.split(',')
            .map(|v| v.trim().parse::<usize>().map_err(|_| bad()))
            .collect()
    };
    Ok((list(s)?, list(e)?))
}

pub fn render_table(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>5} {:>5} {:>7} {:>6} {:>8} {:>11} {:>10}  check",
        "S", "E", "N", "D_v", "ratio", "reduction", "published"
    );
    for row in rows {
        let r = &row.report;
        let published = row.published.map_or("-".to_string(), |p| format!("{p:.2}%"));
        let _ = writeln!(
            out,
            "{:>5} {:>5} {:>7} {:>6} {:>8} {:>11} {:>10}  {}",
            r.input.s,
            r.input.e,
            r.input.n_avg,
            r.input.d_v,
            r.display_ratio(),
            r.display_reduction(),
            published,
            row.check.as_str()
        );
    }
    out
}

/// Full-precision CSV, one line per row.
pub fn write_csv<W: Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["s", "e", "n_avg", "d_v", "ratio", "reduction_percent", "published_percent", "check"])?;
    for row in rows {
        let r = &row.report;
        w.write_record([
            r.input.s.to_string(),
            r.input.e.to_string(),
            r.input.n_avg.to_string(),
            r.input.d_v.to_string(),
            r.ratio.to_string(),
            r.reduction_percent.to_string(),
            row.published.map_or(String::new(), |p| p.to_string()),
            row.check.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
