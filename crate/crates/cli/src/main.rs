//! `qamdt`: synthetic corpora, caption refinement, training, sampling and
//! evaluation for the quality-aware masked diffusion transformer.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::*;
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "qamdt", version, about)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic five-level corpus.
    Synth(SynthArgs),
    /// Summarize p-MOS scores and quality levels of a manifest.
    Stats(StatsArgs),
    /// Re-caption, filter and fuse the captions of a manifest.
    Refine(RefineArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Draw samples from a trained run.
    Sample(SampleArgs),
    /// Compare two sample directories.
    Eval(EvalArgs),
    /// Check loss gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::Synth(a) => synth(a, cfg),
        Command::Stats(a) => stats(a, cfg),
        Command::Refine(a) => refine(a, cfg),
        Command::Train(a) => train(a, cfg),
        Command::Sample(a) => sample_cmd(a, cfg),
        Command::Eval(a) => eval(a, cfg),
        Command::Gradcheck(a) => gradcheck(a, cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code())
        }
    }
}
