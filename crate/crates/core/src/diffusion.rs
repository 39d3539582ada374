//! Noise schedules, forward diffusion, DDPM/DDIM reverse steps, the
//! denoising loss and guided DDIM sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{seeded_normal, Rng, Tensor};
use crate::quality::QualityLevel;
use crate::text::TextEmbedding;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// `beta[t - 1]` is the variance added at step `t`.
    beta: Vec<f64>,
    /// `alpha_bar[t]` for `t` in `0..=T`, with `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Linear β schedule over `t` steps.
pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t == 0 {
        return Err(Error::InvalidArgument(
            "schedule needs at least one step".into(),
        ));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = (0..t)
        .map(|i| {
            if t == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(t + 1);
    alpha_bar.push(1.0);
    for b in &beta {
        let prev = *alpha_bar.last().expect("non-empty");
        alpha_bar.push(prev * (1.0 - b));
    }
    Ok(NoiseSchedule { beta, alpha_bar })
}

impl NoiseSchedule {
    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.len() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} beyond schedule length {}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// `√ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn forward_diffuse(
    z0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, |x, e| a * x + b * e)
}

/// One ancestral DDPM step from `t` to `t − 1`.
pub fn ddpm_step(
    z_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::InvalidArgument("ddpm_step needs t >= 1".into()));
    }
    sched.check_step(t)?;
    z_t.same_shape(noise)?;
    let beta = sched.beta(t);
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));
    let inv = 1.0 / (1.0 - beta).sqrt();
    let coef = beta / (1.0 - ab).sqrt();
    let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
    let mean = z_t.zip_map(eps_hat, |z, e| inv * (z - coef * e))?;
    mean.zip_map(noise, |m, n| m + sigma * n)
}

/// Deterministic (η = 0) DDIM update from `ᾱ_t` to `ᾱ_prev`.
pub fn ddim_step(
    z_t: &Tensor,
    alpha_bar_t: f64,
    alpha_bar_prev: f64,
    eps_hat: &Tensor,
) -> Result<Tensor> {
    let valid = |a: f64| a > 0.0 && a <= 1.0;
    if !valid(alpha_bar_t) || !valid(alpha_bar_prev) {
        return Err(Error::InvalidArgument(format!(
            "alpha_bar values must lie in (0, 1], got {alpha_bar_t} and {alpha_bar_prev}"
        )));
    }
    if alpha_bar_prev == alpha_bar_t {
        z_t.same_shape(eps_hat)?;
        return Ok(z_t.clone());
    }
    let (s_t, n_t) = (alpha_bar_t.sqrt(), (1.0 - alpha_bar_t).sqrt());
    let (s_p, n_p) = (alpha_bar_prev.sqrt(), (1.0 - alpha_bar_prev).sqrt());
    z_t.zip_map(eps_hat, |z, e| {
        let z0 = (z - n_t * e) / s_t;
        s_p * z0 + n_p * e
    })
}

/// `d_cond + w·(d_cond − d_uncond)`.
pub fn cfg_combine(d_cond: &Tensor, d_uncond: &Tensor, w: f64) -> Result<Tensor> {
    check_scale(w)?;
    d_cond.zip_map(d_uncond, |c, u| c + w * (c - u))
}

/// Quality guidance: the high-quality conditional branch is pushed away from
/// the low-quality unconditional one. Same algebra as [`cfg_combine`].
pub fn quality_cfg_combine(d_high_cond: &Tensor, d_low_uncond: &Tensor, w: f64) -> Result<Tensor> {
    cfg_combine(d_high_cond, d_low_uncond, w)
}

fn check_scale(w: f64) -> Result<()> {
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "guidance scale must be >= 0, got {w}"
        )));
    }
    Ok(())
}

/// Anything that predicts the noise in `z_t`.
pub trait NoisePredictor {
    /// `(F, L)` of the latent space.
    fn latent_shape(&self) -> (usize, usize);

    fn embed_text(&self, caption: Option<&str>) -> TextEmbedding;

    fn predict(
        &self,
        z_t: &Tensor,
        t: usize,
        level: QualityLevel,
        text: &TextEmbedding,
    ) -> Result<Tensor>;
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64)
}

/// `mean((ε − D(√ᾱ_t z0 + √(1−ᾱ_t) ε, t, q, y))²)`.
pub fn diffusion_loss<M: NoisePredictor + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    z0: &Tensor,
    t: usize,
    eps: &Tensor,
    level: QualityLevel,
    text: &TextEmbedding,
) -> Result<f64> {
    let z_t = forward_diffuse(z0, t, eps, sched)?;
    let pred = model.predict(&z_t, t, level, text)?;
    if !pred.is_finite() {
        return Err(Error::NonFinite(format!("model prediction at t={t}")));
    }
    mse(eps, &pred)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum GuidanceMode {
    /// `D(q, y)` only.
    ConditionalOnly,
    /// `D(q, y) + w·(D(q, y) − D(q, ∅))`.
    StandardCfg,
    /// `D(q_high, y) + w·(D(q_high, y) − D(q_low, ∅))`, with `q_high` the
    /// requested sample quality.
    QualityCfg { low: QualityLevel },
    /// `D(q, y) + w·(D(q, y) − D(q, y_neg))`.
    NegativePrompt { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub w: f64,
    #[serde(flatten)]
    pub mode: GuidanceMode,
}

pub const DEFAULT_GUIDANCE: f64 = 3.5;
pub const DEFAULT_NEGATIVE_PROMPT: &str = "low quality";

impl GuidanceSpec {
    pub fn conditional() -> Self {
        Self {
            w: 0.0,
            mode: GuidanceMode::ConditionalOnly,
        }
    }

    pub fn standard(w: f64) -> Self {
        Self {
            w,
            mode: GuidanceMode::StandardCfg,
        }
    }

    pub fn quality(w: f64, low: QualityLevel) -> Self {
        Self {
            w,
            mode: GuidanceMode::QualityCfg { low },
        }
    }

    /// Quality guidance from level 1 toward `level`. Level 1 has no lower
    /// level to steer away from and gets standard guidance instead.
    pub fn quality_toward(w: f64, level: QualityLevel) -> Self {
        let lowest = QualityLevel::all().next().expect("five levels");
        if level > lowest {
            Self::quality(w, lowest)
        } else {
            Self::standard(w)
        }
    }

    pub fn negative_prompt(w: f64, text: impl Into<String>) -> Self {
        Self {
            w,
            mode: GuidanceMode::NegativePrompt { text: text.into() },
        }
    }

    pub fn validate(&self, level: QualityLevel) -> Result<()> {
        check_scale(self.w)?;
        if let GuidanceMode::QualityCfg { low } = self.mode {
            if level <= low {
                return Err(Error::InvalidArgument(format!(
                    "quality guidance needs q_high > q_low, got {level} and {low}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub caption: String,
    pub quality: QualityLevel,
    pub steps: usize,
    pub guidance: GuidanceSpec,
    pub seed: u64,
}

/// `steps + 1` evenly spaced timesteps from `T` down to `0`.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::InvalidArgument(format!(
            "sampling steps must be in 1..={t_max}, got {steps}"
        )));
    }
    Ok((0..=steps)
        .rev()
        .map(|k| ((k * t_max) as f64 / steps as f64).round() as usize)
        .collect())
}

/// Noise estimate for one step under the requested guidance.
pub fn guided_noise<M: NoisePredictor + ?Sized>(
    model: &M,
    z_t: &Tensor,
    t: usize,
    level: QualityLevel,
    cond: &TextEmbedding,
    uncond: &TextEmbedding,
    guidance: &GuidanceSpec,
) -> Result<Tensor> {
    let d_cond = model.predict(z_t, t, level, cond)?;
    let d_other = match &guidance.mode {
        GuidanceMode::ConditionalOnly => return Ok(d_cond),
        GuidanceMode::StandardCfg | GuidanceMode::NegativePrompt { .. } => {
            model.predict(z_t, t, level, uncond)?
        }
        GuidanceMode::QualityCfg { low } => model.predict(z_t, t, *low, uncond)?,
    };
    match guidance.mode {
        GuidanceMode::QualityCfg { .. } => quality_cfg_combine(&d_cond, &d_other, guidance.w),
        _ => cfg_combine(&d_cond, &d_other, guidance.w),
    }
}

/// Guided deterministic DDIM sampling from seeded Gaussian noise to `ẑ0`.
pub fn sample<M: NoisePredictor + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    req: &SampleRequest,
) -> Result<Tensor> {
    req.guidance.validate(req.quality)?;
    let timesteps = ddim_timesteps(sched.len(), req.steps)?;
    let (f, l) = model.latent_shape();
    let mut z = seeded_normal(&mut Rng::new(req.seed), &[f, l])?;
    let cond = model.embed_text(Some(&req.caption));
    let uncond = match &req.guidance.mode {
        GuidanceMode::NegativePrompt { text } => model.embed_text(Some(text)),
        _ => TextEmbedding::Null,
    };
    for pair in timesteps.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        let eps = guided_noise(model, &z, t, req.quality, &cond, &uncond, &req.guidance)?;
        z = ddim_step(&z, sched.alpha_bar(t), sched.alpha_bar(t_prev), &eps)?;
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("sampler state after t={t}")));
        }
    }
    Ok(z)
}
