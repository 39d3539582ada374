//! Quality-aware masked diffusion transformer for latent music generation.
//!
//! The crate covers quality-score quantization and injection, a masked
//! transformer noise predictor, quality-guided DDIM sampling, three-stage
//! caption refinement and the dataset tooling needed to exercise them on
//! synthetic latents.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod model;
pub mod numerics;
pub mod patch;
pub mod quality;
pub mod refine;
pub mod text;
pub mod train;

pub use error::{Error, Result};
