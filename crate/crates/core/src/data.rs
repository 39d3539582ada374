//! Dataset persistence, the synthetic corpus and evaluation statistics.
//!
//! Latents are stored one per file in a small binary blob:
//!
//! ```text
//! "QMDT" | version: u32 | F: u32 | L: u32 | F·L × f32   (little-endian, frequency-major)
//! ```
//!
//! Manifests are JSON Lines, one record per line.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::patch::latent_dims;
use crate::quality::{
    fit_stats, prefix_for, quantize, QualityLevel, QualityPrefix, QualityStats, NUM_LEVELS,
};
use crate::refine::CaptionRecord;

pub const BLOB_MAGIC: &[u8; 4] = b"QMDT";
pub const BLOB_VERSION: u32 = 1;
const BLOB_HEADER: usize = 16;

pub fn encode_latent(latent: &Tensor) -> Result<Vec<u8>> {
    let (f, l) = latent_dims(latent)?;
    let mut out = Vec::with_capacity(BLOB_HEADER + 4 * f * l);
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(f as u32).to_le_bytes());
    out.extend_from_slice(&(l as u32).to_le_bytes());
    for &v in latent.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_latent(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let fail = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < BLOB_HEADER {
        return Err(fail(
            bytes.len(),
            format!("truncated header: {} of {BLOB_HEADER} bytes", bytes.len()),
        ));
    }
    if &bytes[..4] != BLOB_MAGIC {
        return Err(fail(
            0,
            format!(
                "bad magic {:?}, expected \"QMDT\"",
                String::from_utf8_lossy(&bytes[..4])
            ),
        ));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != BLOB_VERSION {
        return Err(fail(4, format!("unsupported blob version {version}")));
    }
    let (f, l) = (word(8) as usize, word(12) as usize);
    if f == 0 || l == 0 {
        return Err(fail(8, format!("empty latent {f}x{l}")));
    }
    let expected = BLOB_HEADER + 4 * f * l;
    if bytes.len() != expected {
        return Err(fail(
            bytes.len().min(expected),
            format!(
                "length {} does not match {f}x{l} latent ({expected} bytes)",
                bytes.len()
            ),
        ));
    }
    let data = bytes[BLOB_HEADER..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Tensor::new(vec![f, l], data)
}

pub fn write_latent(path: &Path, latent: &Tensor) -> Result<()> {
    fs::write(path, encode_latent(latent)?).map_err(|e| Error::io(path, e))
}

pub fn read_latent(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_latent(path, &bytes)
}

/// Reads a JSON Lines file; blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        if !line.trim().is_empty() {
            let item = serde_json::from_str(line).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                offset: offset as u64,
                message: format!("line {}: {e}", i + 1),
            })?;
            out.push(item);
        }
        offset += line.len();
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One manifest line of a training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    #[serde(flatten)]
    pub caption: CaptionRecord,
    /// Blob path relative to the manifest's directory.
    pub latent: String,
    pub pmos: f64,
    #[serde(default)]
    pub quality_level: Option<QualityLevel>,
    #[serde(default)]
    pub prefix: Option<QualityPrefix>,
}

/// Fits corpus statistics and fills every record's level and prefix.
pub fn assign_levels(records: &mut [DatasetRecord]) -> Result<QualityStats> {
    let scores: Vec<f64> = records.iter().map(|r| r.pmos).collect();
    let stats = fit_stats(&scores)?;
    for r in records.iter_mut() {
        r.quality_level = Some(quantize(r.pmos, &stats)?);
        r.prefix = prefix_for(r.pmos, &stats);
    }
    Ok(stats)
}

/// Synthetic corpus parameters.
///
/// Each latent is a smooth sum of two 2-D sinusoids whose frequencies are
/// tied to the caption words, plus white noise whose level depends on the
/// record's nominal quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthProfile {
    pub latent_f: usize,
    pub latent_l: usize,
    /// Noise std `η(q)` for q = 1..5; strictly decreasing.
    pub noise_std: [f64; NUM_LEVELS],
    /// Nominal p-MOS `s(q)` for q = 1..5; strictly increasing.
    pub pmos_center: [f64; NUM_LEVELS],
    /// Jitter half-width; drawn on a 1/1024 grid strictly inside it.
    pub pmos_jitter: f64,
    pub amplitude: f64,
}

impl Default for SynthProfile {
    fn default() -> Self {
        Self {
            latent_f: 8,
            latent_l: 32,
            noise_std: [0.8, 0.7, 0.6, 0.5, 0.4],
            pmos_center: [2.25, 2.875, 3.5, 4.125, 4.75],
            pmos_jitter: 0.25,
            amplitude: 0.6,
        }
    }
}

impl SynthProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.latent_f < 2 || self.latent_l < 2 {
            return bad(format!(
                "latent must be at least 2x2, got {}x{}",
                self.latent_f, self.latent_l
            ));
        }
        if self.noise_std.windows(2).any(|w| w[0] <= w[1]) || self.noise_std[NUM_LEVELS - 1] < 0.0 {
            return bad("noise_std must be non-negative and strictly decreasing".into());
        }
        if self.pmos_center.windows(2).any(|w| w[0] >= w[1]) {
            return bad("pmos_center must be strictly increasing".into());
        }
        if !(0.0..=1.0).contains(&self.pmos_jitter) {
            return bad(format!(
                "pmos_jitter must be in [0, 1], got {}",
                self.pmos_jitter
            ));
        }
        Ok(())
    }
}

const TEMPOS: [(&str, f64); 3] = [("slow", 0.25), ("steady", 0.375), ("fast", 0.5)];
const INSTRUMENTS: [(&str, f64); 4] = [
    ("piano", 0.0),
    ("strings", 0.5),
    ("guitar", 1.0),
    ("synth", 1.5),
];
const MOODS: [(&str, f64); 3] = [("calm", 0.25), ("bright", 0.75), ("dark", 1.25)];

/// A generated record with its latent still in memory.
#[derive(Debug, Clone)]
pub struct SynthRecord {
    pub record: DatasetRecord,
    pub latent: Tensor,
    /// Nominal level the record was generated at.
    pub level: QualityLevel,
}

/// Noise-free signal and caption for the given word choices and phases.
fn synth_signal(
    profile: &SynthProfile,
    words: (usize, usize, usize),
    phases: (f64, f64),
) -> (Vec<f64>, String) {
    let (tempo, inst, mood) = words;
    let (f, l) = (profile.latent_f, profile.latent_l);
    let tau = std::f64::consts::TAU;
    let mut out = Vec::with_capacity(f * l);
    for fi in 0..f {
        for li in 0..l {
            let (x, y) = (li as f64 / l as f64, fi as f64 / f as f64);
            let a = (tau * (TEMPOS[tempo].1 * x + INSTRUMENTS[inst].1 * y) + phases.0).sin();
            let b = (tau * (0.125 * x + MOODS[mood].1 * y) + phases.1).sin();
            out.push(profile.amplitude * (a + 0.5 * b));
        }
    }
    let caption = match (tempo + inst + mood) % 3 {
        0 => format!(
            "{} {} {} piece",
            TEMPOS[tempo].0, MOODS[mood].0, INSTRUMENTS[inst].0
        ),
        1 => format!(
            "{} {} at a {} tempo",
            MOODS[mood].0, INSTRUMENTS[inst].0, TEMPOS[tempo].0
        ),
        _ => format!(
            "{} {} with a {} feel",
            TEMPOS[tempo].0, INSTRUMENTS[inst].0, MOODS[mood].0
        ),
    };
    (out, caption)
}

/// Generates `n` records. Record `i` has nominal level `i mod 5 + 1`.
///
/// Jitter is antithetic within every block of ten records (record `k` and
/// `k + 5` get `±j`) and zero at level 3, and all nominal scores lie on a
/// 1/1024 grid. When `n` is a multiple of ten the corpus mean is therefore
/// exactly `s(3)`, which keeps the single-point level 3 populated.
pub fn synth_dataset(n: usize, profile: &SynthProfile, seed: u64) -> Result<Vec<SynthRecord>> {
    profile.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument(
            "dataset size must be at least 1".into(),
        ));
    }
    let grid = 1024.0;
    let max_step = ((profile.pmos_jitter * grid).ceil() as i64 - 1).max(0);
    let (f, l) = (profile.latent_f, profile.latent_l);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let slot = i % 10;
            let level = QualityLevel::new((slot % NUM_LEVELS) as u8 + 1)?;
            let jitter = if level.get() == 3 || max_step == 0 {
                0.0
            } else {
                let pair = (i / 10 * NUM_LEVELS + slot % NUM_LEVELS) as u64;
                let mut jr = Rng::derive(!seed, pair);
                let step = jr.range_inclusive(0, 2 * max_step as usize) as i64 - max_step;
                let sign = if slot < NUM_LEVELS { 1.0 } else { -1.0 };
                sign * step as f64 / grid
            };
            let pmos = (profile.pmos_center[level.index()] + jitter).clamp(0.0, 5.0);

            let mut rng = Rng::derive(seed, i as u64);
            let words = (
                rng.below(TEMPOS.len()),
                rng.below(INSTRUMENTS.len()),
                rng.below(MOODS.len()),
            );
            let phases = (
                rng.uniform() * std::f64::consts::TAU,
                rng.uniform() * std::f64::consts::TAU,
            );
            let (signal, caption) = synth_signal(profile, words, phases);
            let eta = profile.noise_std[level.index()];
            let data = signal.into_iter().map(|s| s + eta * rng.normal()).collect();
            // Stored at blob precision so a reload is bitwise identical.
            let latent = Tensor::new(vec![f, l], data)?.map(|v| f64::from(v as f32));
            let id = format!("rec{i:06}");
            let record = DatasetRecord {
                latent: format!("latents/{id}.qmdt"),
                caption: CaptionRecord::new(id, caption),
                pmos,
                quality_level: None,
                prefix: None,
            };
            Ok(SynthRecord {
                record,
                latent,
                level,
            })
        })
        .collect()
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Writes blobs under `dir/latents/` and the manifest to `dir/manifest.jsonl`.
pub fn write_dataset(dir: &Path, records: &[SynthRecord]) -> Result<()> {
    let latents = dir.join("latents");
    fs::create_dir_all(&latents).map_err(|e| Error::io(&latents, e))?;
    records
        .par_iter()
        .try_for_each(|r| write_latent(&dir.join(&r.record.latent), &r.latent))?;
    let manifest: Vec<&DatasetRecord> = records.iter().map(|r| &r.record).collect();
    write_jsonl(&dir.join(MANIFEST_NAME), &manifest)
}

/// Loads a manifest and every latent it references.
pub fn load_dataset(manifest: &Path) -> Result<Vec<(DatasetRecord, Tensor)>> {
    let records: Vec<DatasetRecord> = read_jsonl(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    records
        .into_par_iter()
        .map(|r| {
            let latent = read_latent(&base.join(&r.latent))?;
            Ok((r, latent))
        })
        .collect()
}

/// Robust additive-noise std: MAD of first differences along time, scaled by
/// `1 / (√2 · 0.6745)` for Gaussian consistency.
pub fn noise_floor_estimate(latent: &Tensor) -> Result<f64> {
    let (f, l) = latent_dims(latent)?;
    if f < 2 || l < 2 {
        return Err(Error::Shape(format!(
            "noise floor needs at least 2x2, got {f}x{l}"
        )));
    }
    let d = latent.data();
    let mut diffs: Vec<f64> = (0..f)
        .flat_map(|r| (1..l).map(move |c| d[r * l + c] - d[r * l + c - 1]))
        .collect();
    let med = median(&mut diffs);
    let mut dev: Vec<f64> = diffs.iter().map(|x| (x - med).abs()).collect();
    Ok(median(&mut dev) / (std::f64::consts::SQRT_2 * 0.6745))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Sample mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMoments {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.len() != d * d {
            return Err(Error::Shape(format!(
                "moments need a {d}x{d} covariance, got {} values",
                cov.len()
            )));
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov: DMatrix::from_row_slice(d, d, &cov),
        })
    }

    /// Fits rows of `features` (`n ≥ 2` samples of equal width).
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least two samples, got {n}"
            )));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|x| x.len() != d) {
            return Err(Error::Shape(
                "feature vectors must share a non-zero width".into(),
            ));
        }
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = x.row_mean().transpose();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Added to both covariances before the matrix square root.
pub const FRECHET_REGULARIZER: f64 = 1e-6;

/// `‖μx − μy‖² + Tr(Σx + Σy − 2(Σx Σy)^½)` with `Σ + εI` on both sides.
///
/// The trace of the square root is computed as `Tr((√Σx Σy √Σx)^½)`, which
/// only needs symmetric eigendecompositions.
pub fn frechet_from_moments(x: &GaussianMoments, y: &GaussianMoments) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Shape(format!(
            "feature widths differ: {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    let d = x.dim();
    let reg = DMatrix::<f64>::identity(d, d) * FRECHET_REGULARIZER;
    let sx = symmetrize(&x.cov) + &reg;
    let sy = symmetrize(&y.cov) + &reg;
    let root_x = psd_sqrt(&sx);
    let inner = symmetrize(&(&root_x * &sy * &root_x));
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum();
    let mean_term = (&x.mean - &y.mean).norm_squared();
    let value = mean_term + sx.trace() + sy.trace() - 2.0 * tr_sqrt;
    if !value.is_finite() {
        return Err(Error::NonFinite("Fréchet distance".into()));
    }
    Ok(value.max(0.0))
}

/// Gaussian Fréchet distance between two feature sets.
pub fn frechet_gaussian(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    frechet_from_moments(&GaussianMoments::fit(x)?, &GaussianMoments::fit(y)?)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Maps a latent to a feature vector for distribution comparisons.
pub trait FeatureExtractor: Send + Sync {
    fn features(&self, latent: &Tensor) -> Vec<f64>;
}

/// The flattened latent itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityFeatures;

impl FeatureExtractor for IdentityFeatures {
    fn features(&self, latent: &Tensor) -> Vec<f64> {
        latent.data().to_vec()
    }
}

/// Fractional ranks (ties share their mean rank).
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of fractional ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "spearman needs two equal-length series of at least 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument(
            "spearman of a constant series".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Corpus-level p-MOS summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub mu: f64,
    pub sigma: f64,
    pub n: usize,
    /// Counts over ten equal bins of `[0, 5]`; the last bin includes 5.
    pub histogram: Vec<usize>,
    /// Records per quantized level 1..5.
    pub level_counts: [usize; NUM_LEVELS],
}

pub fn stats_report(scores: &[f64]) -> Result<StatsReport> {
    let stats = fit_stats(scores)?;
    let mut histogram = vec![0; 10];
    let mut level_counts = [0; NUM_LEVELS];
    for &s in scores {
        histogram[((s / 0.5) as usize).min(9)] += 1;
        level_counts[quantize(s, &stats)?.index()] += 1;
    }
    Ok(StatsReport {
        mu: stats.mu,
        sigma: stats.sigma,
        n: stats.n,
        histogram,
        level_counts,
    })
}
