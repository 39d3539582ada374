use std::fs;
use std::path::{Path, PathBuf};

use qamdt_core::data::SynthProfile;
use qamdt_core::diffusion::{ScheduleConfig, DEFAULT_GUIDANCE, DEFAULT_NEGATIVE_PROMPT};
use qamdt_core::model::ModelConfig;
use qamdt_core::refine::RefineConfig;
use qamdt_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Everything a run depends on besides its command-line paths.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub refine: RefineConfig,
    pub gradcheck: GradcheckConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub profile: SynthProfile,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 2500,
            profile: SynthProfile::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Prepend the record's quality prefix to its caption during training.
    pub quality_prefix: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    /// Quality-token guidance away from the low level and the null caption.
    Quality,
    /// Caption guidance at the requested level.
    Standard,
    /// No guidance.
    Conditional,
    /// Caption guidance away from a negative prompt.
    NegativePrompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub steps: usize,
    pub w: f64,
    pub mode: SampleMode,
    pub quality: u8,
    /// Level the quality mode steers away from.
    pub low: u8,
    pub negative_prompt: String,
    pub count: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            w: DEFAULT_GUIDANCE,
            mode: SampleMode::Quality,
            quality: 5,
            low: 1,
            negative_prompt: DEFAULT_NEGATIVE_PROMPT.to_string(),
            count: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub h: f64,
    pub tolerance: f64,
    pub model: ModelConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-5,
            model: ModelConfig::tiny(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.message().to_string(),
        })
    }
}

/// The resolved invocation, echoed to stderr and saved next to outputs.
#[derive(Debug, Serialize)]
pub struct RunLog<'a, A: Serialize> {
    pub command: &'a str,
    pub args: &'a A,
    pub config: &'a RunConfig,
}

impl<A: Serialize> RunLog<'_, A> {
    pub fn render(&self) -> Result<String, CliError> {
        toml::to_string(self)
            .map_err(|e| CliError::Usage(format!("cannot render resolved config: {e}")))
    }
}

/// A saved run log; only the config is read back.
#[derive(Debug, Deserialize)]
pub struct SavedRun {
    pub config: RunConfig,
}

pub const RUN_LOG: &str = "run.toml";

impl SavedRun {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path: PathBuf = dir.join(RUN_LOG);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config {
            path,
            message: e.message().to_string(),
        })
    }
}
