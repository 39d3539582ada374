use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::PatchConfig;
use crate::quality::NUM_LEVELS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Model width `d`.
    pub d: usize,
    /// Encoder depth `N`.
    pub n_enc: usize,
    /// Decoder depth `M`.
    pub n_dec: usize,
    pub heads: usize,
    /// Feed-forward hidden width as a multiple of `d`.
    pub mlp_ratio: usize,
    /// Latent frequency bins `F`.
    pub latent_f: usize,
    /// Latent time frames `L`.
    pub latent_l: usize,
    pub patch: PatchConfig,
    pub text_dim: usize,
    /// Width of the sinusoidal timestep features.
    pub time_freq_dim: usize,
    pub rope_base: f64,
}

impl ModelConfig {
    /// A 4×8 latent at width 32, just under 50k parameters. Small enough for an
    /// exhaustive finite-difference gradient check.
    pub fn tiny() -> Self {
        Self {
            d: 32,
            n_enc: 2,
            n_dec: 1,
            heads: 2,
            mlp_ratio: 1,
            latent_f: 4,
            latent_l: 8,
            patch: PatchConfig {
                p_f: 1,
                p_l: 4,
                o_f: 0,
                o_l: 0,
            },
            text_dim: 8,
            time_freq_dim: 16,
            rope_base: 10_000.0,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            n_enc: 2,
            n_dec: 1,
            heads: 4,
            mlp_ratio: 2,
            latent_f: 8,
            latent_l: 32,
            patch: PatchConfig {
                p_f: 2,
                p_l: 4,
                o_f: 0,
                o_l: 0,
            },
            text_dim: 32,
            time_freq_dim: 64,
            rope_base: 10_000.0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!(
                "width {} not divisible by {} heads",
                self.d, self.heads
            ));
        }
        if !self.d.is_multiple_of(4) || !self.head_dim().is_multiple_of(4) {
            return bad(format!(
                "2-D rotary needs width and head width divisible by 4 (d={}, head={})",
                self.d,
                self.head_dim()
            ));
        }
        if self.n_enc == 0 || self.n_dec == 0 {
            return bad("encoder and decoder need at least one block each".into());
        }
        if self.mlp_ratio == 0 || self.text_dim == 0 {
            return bad("mlp_ratio and text_dim must be positive".into());
        }
        if self.time_freq_dim == 0 || !self.time_freq_dim.is_multiple_of(2) {
            return bad(format!(
                "time_freq_dim must be even, got {}",
                self.time_freq_dim
            ));
        }
        if self.rope_base.is_nan() || self.rope_base <= 1.0 {
            return bad(format!("rope_base must exceed 1, got {}", self.rope_base));
        }
        self.patch.grid(self.latent_f, self.latent_l)?;
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d;
        let pd = self.patch.token_dim();
        let hidden = self.mlp_ratio * d;
        let patch_in = pd * d + d;
        let time = self.time_freq_dim * d + d + d * d + d;
        let embeddings = NUM_LEVELS * d + d + self.text_dim;
        let block = (d * 6 * d + 6 * d) // adaptive norm
            + 3 * d * d + d * d + d // self-attention
            + d * d + self.text_dim * 2 * d + d * d + d // cross-attention
            + d * hidden + hidden + hidden * d + d; // feed-forward
        let final_layer = d * 2 * d + 2 * d + d * pd + pd;
        patch_in + time + embeddings + (self.n_enc + self.n_dec) * block + final_layer
    }
}
