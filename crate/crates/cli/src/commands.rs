use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use log::info;
use qamdt_core::data::{
    assign_levels, frechet_gaussian, load_dataset, noise_floor_estimate, read_jsonl, read_latent,
    stats_report, synth_dataset, write_dataset, write_jsonl, write_latent, DatasetRecord,
    FeatureExtractor, IdentityFeatures, MANIFEST_NAME,
};
use qamdt_core::diffusion::{sample, GuidanceSpec, SampleRequest};
use qamdt_core::model::{load_checkpoint, loss_gradient_check, save_checkpoint, QaMdt};
use qamdt_core::numerics::{Rng, Tensor};
use qamdt_core::quality::{apply_prefix, QualityLevel};
use qamdt_core::refine::{refine_manifest, ClientMode, Clients};
use qamdt_core::text::TextEncoder;
use qamdt_core::train::{Trainer, TrainingExample};
use serde::Serialize;
use serde_json::json;

use crate::config::{RunConfig, RunLog, SampleMode, SavedRun, RUN_LOG};
use crate::error::CliError;

pub const CHECKPOINT_NAME: &str = "model.ckpt";
pub const LOSS_LOG: &str = "loss.csv";
pub const SAMPLES_MANIFEST: &str = "samples.jsonl";

fn level_arg() -> clap::builder::RangedI64ValueParser<u8> {
    clap::value_parser!(u8).range(1..=5)
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Output directory for the manifest and latent blobs.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of records.
    #[arg(long)]
    pub n: Option<usize>,
    /// Replace an existing dataset in `out`.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RefineArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Refined manifest to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Fixture file for all three clients, switching them to mock mode.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    #[arg(long)]
    pub rho1: Option<f64>,
    #[arg(long)]
    pub rho2: Option<f64>,
    #[arg(long)]
    pub rho3: Option<f64>,
    /// Directory for cached client replies.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Run directory for the checkpoint, loss log and run log.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub caption: String,
    /// Requested quality level, 1 to 5.
    #[arg(long, value_parser = level_arg())]
    pub quality: Option<u8>,
    #[arg(long)]
    pub count: Option<usize>,
    /// DDIM steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Guidance scale.
    #[arg(long)]
    pub w: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<SampleMode>,
    /// Level the quality mode steers away from.
    #[arg(long, value_parser = level_arg())]
    pub low: Option<u8>,
    #[arg(long)]
    pub negative_prompt: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Directory of `.qmdt` samples.
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Also write the metrics here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// Central-difference step.
    #[arg(long)]
    pub h: Option<f64>,
    /// Largest acceptable relative error.
    #[arg(long)]
    pub tolerance: Option<f64>,
}

/// Prints the resolved run to stderr and, given a directory, saves it there.
fn echo<A: Serialize>(
    command: &str,
    args: &A,
    cfg: &RunConfig,
    dir: Option<&Path>,
) -> Result<(), CliError> {
    let text = RunLog {
        command,
        args,
        config: cfg,
    }
    .render()?;
    eprintln!("# resolved run\n{text}");
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(RUN_LOG);
        fs::write(&path, &text).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}

fn print_json(value: &serde_json::Value) -> Result<String, CliError> {
    let text = serde_json::to_string_pretty(value).map_err(qamdt_core::Error::from)?;
    println!("{text}");
    Ok(text)
}

pub fn synth(args: &SynthArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    if let Some(n) = args.n {
        cfg.synth.n = n;
    }
    let manifest = args.out.join(MANIFEST_NAME);
    if manifest.exists() && !args.force {
        return Err(CliError::Failed(format!(
            "{} already exists; pass --force to replace it",
            manifest.display()
        )));
    }
    echo("synth", args, &cfg, Some(&args.out))?;
    let mut records = synth_dataset(cfg.synth.n, &cfg.synth.profile, cfg.seed)?;
    let mut manifest_records: Vec<DatasetRecord> =
        records.iter().map(|r| r.record.clone()).collect();
    let stats = assign_levels(&mut manifest_records)?;
    for (r, m) in records.iter_mut().zip(manifest_records) {
        r.record = m;
    }
    write_dataset(&args.out, &records)?;
    info!(
        "wrote {} records to {} (mu {:.4}, sigma {:.4})",
        records.len(),
        args.out.display(),
        stats.mu,
        stats.sigma
    );
    println!("{}", manifest.display());
    Ok(())
}

pub fn stats(args: &StatsArgs, cfg: RunConfig) -> Result<(), CliError> {
    echo("stats", args, &cfg, None)?;
    let records: Vec<DatasetRecord> = read_jsonl(&args.manifest)?;
    let scores: Vec<f64> = records.iter().map(|r| r.pmos).collect();
    let report = stats_report(&scores)?;
    print_json(&serde_json::to_value(report).map_err(qamdt_core::Error::from)?)?;
    Ok(())
}

pub fn refine(args: &RefineArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    let t = &mut cfg.refine.thresholds;
    for (slot, flag) in [
        (&mut t.rho1, args.rho1),
        (&mut t.rho2, args.rho2),
        (&mut t.rho3, args.rho3),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(f) = &args.fixtures {
        for c in [
            &mut cfg.refine.captioner,
            &mut cfg.refine.scorer,
            &mut cfg.refine.fuser,
        ] {
            c.mode = ClientMode::Mock;
            c.fixtures = Some(f.clone());
        }
    }
    if let Some(dir) = &args.cache {
        cfg.refine.cache_dir = Some(dir.clone());
    }
    echo("refine", args, &cfg, None)?;
    let lines: Vec<serde_json::Value> = read_jsonl(&args.manifest)?;
    let clients = Clients::from_config(&cfg.refine)?;
    let (out, summary) = refine_manifest(lines, &clients, &cfg.refine)?;
    write_jsonl(&args.out, &out)?;
    print_json(&serde_json::to_value(summary).map_err(qamdt_core::Error::from)?)?;
    Ok(())
}

pub fn train(args: &TrainArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    if let Some(v) = args.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = args.batch {
        cfg.train.batch = v;
    }
    cfg.train.validate()?;
    cfg.model.validate()?;
    echo("train", args, &cfg, Some(&args.out))?;

    let loaded = load_dataset(&args.manifest)?;
    let (mut records, latents): (Vec<DatasetRecord>, Vec<Tensor>) = loaded.into_iter().unzip();
    if records.iter().any(|r| r.quality_level.is_none()) {
        let stats = assign_levels(&mut records)?;
        info!(
            "assigned quality levels (mu {:.4}, sigma {:.4})",
            stats.mu, stats.sigma
        );
    }
    let model = QaMdt::init(cfg.model, cfg.seed)?;
    let enc = model.text_encoder().clone();
    let data: Vec<TrainingExample> = records
        .iter()
        .zip(latents)
        .map(|(r, latent)| {
            let caption = r.caption.training_caption();
            let caption = if cfg.data.quality_prefix {
                apply_prefix(caption, r.prefix)
            } else {
                caption.to_string()
            };
            TrainingExample {
                latent,
                text: enc.encode(Some(&caption)),
                level: r.quality_level.expect("levels assigned above"),
            }
        })
        .collect();

    let sched = cfg.schedule.build()?;
    let mut trainer = Trainer::new(model, &sched, cfg.train.clone(), cfg.seed)?;
    let loss_path = args.out.join(LOSS_LOG);
    let file = fs::File::create(&loss_path).map_err(|e| CliError::io(&loss_path, e))?;
    let mut log = BufWriter::new(file);
    writeln!(log, "step,loss").map_err(|e| CliError::io(&loss_path, e))?;
    let every = (cfg.train.steps / 20).max(1);
    let mut write_err = None;
    trainer.run(&data, |step, loss| {
        if let Err(e) = writeln!(log, "{step},{loss}") {
            write_err.get_or_insert(e);
        }
        if (step + 1) % every == 0 {
            info!("step {}/{} loss {loss:.5}", step + 1, cfg.train.steps);
        }
    })?;
    if let Some(e) = write_err {
        return Err(CliError::io(&loss_path, e));
    }
    log.flush().map_err(|e| CliError::io(&loss_path, e))?;
    let ckpt = args.out.join(CHECKPOINT_NAME);
    save_checkpoint(&ckpt, trainer.model().params())?;
    println!("{}", ckpt.display());
    Ok(())
}

fn guidance(cfg: &RunConfig, level: QualityLevel) -> Result<GuidanceSpec, CliError> {
    let s = &cfg.sample;
    Ok(match s.mode {
        SampleMode::Conditional => GuidanceSpec::conditional(),
        SampleMode::Standard => GuidanceSpec::standard(s.w),
        SampleMode::NegativePrompt => GuidanceSpec::negative_prompt(s.w, s.negative_prompt.clone()),
        SampleMode::Quality => {
            let low = QualityLevel::new(s.low)?;
            if level > low {
                GuidanceSpec::quality(s.w, low)
            } else {
                log::warn!("quality {level} is not above low level {low}; using standard guidance");
                GuidanceSpec::standard(s.w)
            }
        }
    })
}

#[derive(Serialize)]
struct SampleEntry<'a> {
    file: String,
    caption: &'a str,
    quality: u8,
    seed: u64,
    noise_floor: f64,
}

pub fn sample_cmd(args: &SampleArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    let s = &mut cfg.sample;
    if let Some(v) = args.quality {
        s.quality = v;
    }
    if let Some(v) = args.count {
        s.count = v;
    }
    if let Some(v) = args.steps {
        s.steps = v;
    }
    if let Some(v) = args.w {
        s.w = v;
    }
    if let Some(v) = args.mode {
        s.mode = v;
    }
    if let Some(v) = args.low {
        s.low = v;
    }
    if let Some(v) = &args.negative_prompt {
        s.negative_prompt = v.clone();
    }
    let level =
        QualityLevel::new(cfg.sample.quality).map_err(|e| CliError::Usage(e.to_string()))?;
    // the architecture and schedule are those the checkpoint was trained with
    let saved = SavedRun::load(&args.run)?;
    cfg.model = saved.config.model;
    cfg.schedule = saved.config.schedule;
    let guidance = guidance(&cfg, level)?;
    guidance
        .validate(level)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    echo("sample", args, &cfg, Some(&args.out))?;

    let params = load_checkpoint(&args.run.join(CHECKPOINT_NAME))?;
    let model = QaMdt::from_params(cfg.model, params)?;
    let sched = cfg.schedule.build()?;
    let mut entries = Vec::with_capacity(cfg.sample.count);
    for i in 0..cfg.sample.count {
        let seed = Rng::derive(cfg.seed, i as u64).next_u64();
        let req = SampleRequest {
            caption: args.caption.clone(),
            quality: level,
            steps: cfg.sample.steps,
            guidance: guidance.clone(),
            seed,
        };
        let z = sample(&model, &sched, &req)?;
        let file = format!("sample_{i:04}.qmdt");
        write_latent(&args.out.join(&file), &z)?;
        let noise_floor = noise_floor_estimate(&z)?;
        info!("{file}: noise floor {noise_floor:.4}");
        entries.push(SampleEntry {
            file,
            caption: &args.caption,
            quality: level.get(),
            seed,
            noise_floor,
        });
    }
    write_jsonl(&args.out.join(SAMPLES_MANIFEST), &entries)?;
    println!("{}", args.out.join(SAMPLES_MANIFEST).display());
    Ok(())
}

fn load_blobs(dir: &Path) -> Result<Vec<Tensor>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "qmdt"))
        .collect();
    paths.sort();
    if paths.len() < 2 {
        return Err(CliError::Failed(format!(
            "{} holds {} latent blobs; need at least 2",
            dir.display(),
            paths.len()
        )));
    }
    paths.iter().map(|p| Ok(read_latent(p)?)).collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn eval(args: &EvalArgs, cfg: RunConfig) -> Result<(), CliError> {
    echo("eval", args, &cfg, None)?;
    let (a, b) = (load_blobs(&args.a)?, load_blobs(&args.b)?);
    let fa: Vec<Vec<f64>> = a.iter().map(|t| IdentityFeatures.features(t)).collect();
    let fb: Vec<Vec<f64>> = b.iter().map(|t| IdentityFeatures.features(t)).collect();
    let frechet = frechet_gaussian(&fa, &fb)?;
    let floor = |set: &[Tensor]| -> Result<f64, CliError> {
        let v = set
            .iter()
            .map(noise_floor_estimate)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(mean(&v))
    };
    let metrics = json!({
        "frechet": frechet,
        "a": { "count": a.len(), "mean_noise_floor": floor(&a)? },
        "b": { "count": b.len(), "mean_noise_floor": floor(&b)? },
    });
    let text = print_json(&metrics)?;
    if let Some(out) = &args.out {
        fs::write(out, text + "\n").map_err(|e| CliError::io(out, e))?;
    }
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    if let Some(h) = args.h {
        cfg.gradcheck.h = h;
    }
    if let Some(t) = args.tolerance {
        cfg.gradcheck.tolerance = t;
    }
    cfg.gradcheck.model.validate()?;
    echo("gradcheck", args, &cfg, None)?;
    let g = &cfg.gradcheck;
    let report = loss_gradient_check(g.model, cfg.seed, g.h)?;
    let passed = report.max_rel_error < g.tolerance;
    let worst = report
        .worst
        .as_ref()
        .map(|(name, i)| json!({ "param": name, "index": i }));
    print_json(&json!({
        "params": g.model.param_count(),
        "h": g.h,
        "max_rel_error": report.max_rel_error,
        "worst": worst,
        "tolerance": g.tolerance,
        "passed": passed,
    }))?;
    if passed {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "max relative error {:e} is not below {:e}",
            report.max_rel_error, g.tolerance
        )))
    }
}
