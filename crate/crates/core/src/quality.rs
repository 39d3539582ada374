//! p-MOS statistics, five-level quantization, quality caption prefixes and
//! the quality embedding lookup.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub const NUM_LEVELS: usize = 5;
pub const MAX_SCORE: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityStats {
    pub mu: f64,
    pub sigma: f64,
    pub n: usize,
}

/// Quantized quality in `1..=5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct QualityLevel(u8);

impl QualityLevel {
    pub fn new(level: u8) -> Result<Self> {
        if (1..=NUM_LEVELS as u8).contains(&level) {
            Ok(Self(level))
        } else {
            Err(Error::InvalidArgument(format!(
                "quality level must be in 1..=5, got {level}"
            )))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Zero-based row in the embedding table.
    pub fn index(self) -> usize {
        usize::from(self.0 - 1)
    }

    pub fn all() -> impl Iterator<Item = QualityLevel> {
        (1..=NUM_LEVELS as u8).map(QualityLevel)
    }
}

impl TryFrom<u8> for QualityLevel {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<QualityLevel> for u8 {
    fn from(q: QualityLevel) -> u8 {
        q.0
    }
}

impl fmt::Display for QualityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

fn check_score(s: f64) -> Result<()> {
    if !(0.0..=MAX_SCORE).contains(&s) {
        return Err(Error::InvalidArgument(format!(
            "p-MOS score must lie in [0, 5], got {s}"
        )));
    }
    Ok(())
}

/// Population mean and standard deviation of a score set.
pub fn fit_stats(scores: &[f64]) -> Result<QualityStats> {
    if scores.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two scores, got {}",
            scores.len()
        )));
    }
    for &s in scores {
        check_score(s)?;
    }
    let n = scores.len() as f64;
    let mu = scores.iter().sum::<f64>() / n;
    let sigma = (scores.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n).sqrt();
    if sigma <= 0.0 {
        return Err(Error::InvalidArgument(
            "scores are constant; standard deviation is zero".into(),
        ));
    }
    Ok(QualityStats {
        mu,
        sigma,
        n: scores.len(),
    })
}

/// `⌊(s − (μ − 2σ)) / σ⌋ + r` with `r = 2` above the mean and `1` otherwise,
/// clamped into `1..=5`.
///
/// Evaluated as `⌊(s − μ)/σ + 2⌋ + r`, which is the same expression but
/// exact at `s == μ`. Taken literally the offset `r` leaves level 3 only for
/// `s == μ`: scores below the mean land on 1 or 2 and scores above it on 4
/// or 5.
pub fn quantize(s: f64, stats: &QualityStats) -> Result<QualityLevel> {
    if stats.sigma <= 0.0 || !stats.sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {}",
            stats.sigma
        )));
    }
    check_score(s)?;
    let r = if s > stats.mu { 2.0 } else { 1.0 };
    let raw = ((s - stats.mu) / stats.sigma + 2.0).floor() + r;
    let clamped = raw.clamp(1.0, NUM_LEVELS as f64);
    QualityLevel::new(clamped as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityPrefix {
    Low,
    Medium,
    High,
}

impl QualityPrefix {
    pub fn text(self) -> &'static str {
        match self {
            QualityPrefix::Low => "low quality",
            QualityPrefix::Medium => "medium quality",
            QualityPrefix::High => "high quality",
        }
    }
}

/// Low below `μ − 2σ`, medium within `[μ − σ, μ + σ]`, high above `μ + 2σ`;
/// scores between the bands get no prefix.
pub fn prefix_for(s: f64, stats: &QualityStats) -> Option<QualityPrefix> {
    let (mu, sigma) = (stats.mu, stats.sigma);
    if s < mu - 2.0 * sigma {
        Some(QualityPrefix::Low)
    } else if s > mu + 2.0 * sigma {
        Some(QualityPrefix::High)
    } else if (mu - sigma..=mu + sigma).contains(&s) {
        Some(QualityPrefix::Medium)
    } else {
        None
    }
}

/// `"<prefix>, <caption>"`, or just the prefix for an empty caption.
pub fn apply_prefix(caption: &str, prefix: Option<QualityPrefix>) -> String {
    match prefix {
        None => caption.to_string(),
        Some(p) if caption.trim().is_empty() => p.text().to_string(),
        Some(p) => format!("{}, {caption}", p.text()),
    }
}

/// Five learned `d`-wide rows, one per quality level.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityEmbeddingTable {
    pub rows: Tensor,
}

impl QualityEmbeddingTable {
    pub fn init(d: usize, rng: &mut Rng) -> Result<Self> {
        let rows = Tensor::matrix(NUM_LEVELS, d, rng.normal_vec(NUM_LEVELS * d))?;
        Ok(Self { rows })
    }

    pub fn from_tensor(rows: Tensor) -> Result<Self> {
        if rows.shape().len() != 2 || rows.rows() != NUM_LEVELS {
            return Err(Error::Shape(format!(
                "quality table must be [5, d], got {:?}",
                rows.shape()
            )));
        }
        Ok(Self { rows })
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }
}

/// Row lookup for a raw level; levels outside `1..=5` are rejected.
pub fn embed_level(level: u8, table: &QualityEmbeddingTable) -> Result<Tensor> {
    let q = QualityLevel::new(level)?;
    Tensor::new(vec![table.dim()], table.rows.row(q.index()).to_vec())
}
