use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
seed = 3

[model]
d = 32
n_enc = 2
n_dec = 1
heads = 2
mlp_ratio = 1
latent_f = 4
latent_l = 8
text_dim = 8
time_freq_dim = 16
patch = { p_f = 1, p_l = 4, o_f = 0, o_l = 0 }

[synth]
n = 40

[synth.profile]
latent_f = 4
latent_l = 8

[train]
steps = 5
batch = 4

[sample]
steps = 10
count = 2
"#;

fn qamdt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qamdt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = qamdt(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> String {
        s(&self.path("tiny.toml")).to_string()
    }

    fn synth(&self, name: &str) -> PathBuf {
        let out = self.path(name);
        ok(&["synth", "--config", &self.config(), "--out", s(&out)]);
        out
    }

    fn train(&self, data: &Path, name: &str) -> PathBuf {
        let run = self.path(name);
        let manifest = data.join("manifest.jsonl");
        ok(&[
            "train",
            "--config",
            &self.config(),
            "--manifest",
            s(&manifest),
            "--out",
            s(&run),
        ]);
        run
    }
}

fn one_line_error(out: &Output) {
    let err = String::from_utf8_lossy(&out.stderr);
    let last = err.lines().last().unwrap_or_default();
    assert!(last.starts_with("error"), "{err}");
}

#[test]
fn synth_then_stats() {
    let ws = Workspace::new();
    let data = ws.synth("data");
    let manifest = data.join("manifest.jsonl");
    assert_eq!(fs::read_to_string(&manifest).unwrap().lines().count(), 40);
    assert!(data.join("latents/rec000000.qmdt").exists());
    assert!(data.join("run.toml").exists());
    let report = stdout_json(&ok(&["stats", "--manifest", s(&manifest)]));
    assert_eq!(report["n"], 40);
    assert_eq!(report["mu"], 3.5);
    assert_eq!(report["level_counts"], serde_json::json!([8, 8, 8, 8, 8]));
}

#[test]
fn synth_refuses_to_overwrite() {
    let ws = Workspace::new();
    let data = ws.synth("data");
    let again = qamdt(&["synth", "--config", &ws.config(), "--out", s(&data)]);
    assert_eq!(again.status.code(), Some(1));
    one_line_error(&again);
    ok(&[
        "synth",
        "--config",
        &ws.config(),
        "--out",
        s(&data),
        "--force",
    ]);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let ws = Workspace::new();
    let bad = ws.path("bad.toml");
    fs::write(&bad, "[train]\nstepz = 3\n").unwrap();
    let out = qamdt(&["synth", "--config", s(&bad), "--out", s(&ws.path("x"))]);
    assert_eq!(out.status.code(), Some(2));
    one_line_error(&out);
    assert!(!ws.path("x").exists());
}

#[test]
fn resolved_config_is_echoed_with_flag_overrides() {
    let ws = Workspace::new();
    let data = ws.synth("data");
    let run = ws.path("run");
    let manifest = data.join("manifest.jsonl");
    let out = ok(&[
        "train",
        "--config",
        &ws.config(),
        "--seed",
        "11",
        "--steps",
        "2",
        "--manifest",
        s(&manifest),
        "--out",
        s(&run),
    ]);
    let err = String::from_utf8_lossy(&out.stderr);
    let log = fs::read_to_string(run.join("run.toml")).unwrap();
    assert!(err.contains(&log));
    let parsed: toml::Table = toml::from_str(&log).unwrap();
    assert_eq!(parsed["config"]["seed"].as_integer(), Some(11));
    assert_eq!(parsed["config"]["train"]["steps"].as_integer(), Some(2));
    assert_eq!(parsed["config"]["train"]["batch"].as_integer(), Some(4));
    assert_eq!(parsed["command"].as_str(), Some("train"));

    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,loss");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,"));
    assert!(lines[2]
        .split(',')
        .nth(1)
        .unwrap()
        .parse::<f64>()
        .unwrap()
        .is_finite());
}

#[test]
fn train_and_sample_are_deterministic() {
    let ws = Workspace::new();
    let data = ws.synth("data");
    let data2 = ws.synth("data2");
    assert_eq!(
        fs::read(data.join("manifest.jsonl")).unwrap(),
        fs::read(data2.join("manifest.jsonl")).unwrap()
    );
    let a = ws.train(&data, "run_a");
    let b = ws.train(&data, "run_b");
    assert_eq!(
        fs::read(a.join("model.ckpt")).unwrap(),
        fs::read(b.join("model.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("loss.csv")).unwrap(),
        fs::read(b.join("loss.csv")).unwrap()
    );

    let sample = |run: &Path, out: &str| {
        let out = ws.path(out);
        ok(&[
            "sample",
            "--config",
            &ws.config(),
            "--run",
            s(run),
            "--out",
            s(&out),
            "--caption",
            "slow calm piano piece",
            "--quality",
            "4",
        ]);
        out
    };
    let (sa, sb) = (sample(&a, "sa"), sample(&b, "sb"));
    for f in ["sample_0000.qmdt", "sample_0001.qmdt", "samples.jsonl"] {
        assert_eq!(
            fs::read(sa.join(f)).unwrap(),
            fs::read(sb.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_ne!(
        fs::read(sa.join("sample_0000.qmdt")).unwrap(),
        fs::read(sa.join("sample_0001.qmdt")).unwrap()
    );
}

#[test]
fn sample_modes_and_level_checks() {
    let ws = Workspace::new();
    let data = ws.synth("data");
    let run = ws.train(&data, "run");
    let base = |out: &str| {
        vec![
            "sample".to_string(),
            "--config".into(),
            ws.config(),
            "--run".into(),
            s(&run).into(),
            "--out".into(),
            s(&ws.path(out)).into(),
            "--caption".into(),
            "fast bright synth".into(),
            "--count".into(),
            "1".into(),
        ]
    };
    let call = |out: &str, extra: &[&str]| {
        let mut args = base(out);
        args.extend(extra.iter().map(|x| x.to_string()));
        qamdt(&args.iter().map(String::as_str).collect::<Vec<_>>())
    };

    for (i, mode) in ["quality", "standard", "conditional", "negative-prompt"]
        .iter()
        .enumerate()
    {
        let out = call(&format!("m{i}"), &["--mode", mode, "--quality", "3"]);
        assert!(
            out.status.success(),
            "{mode}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let neg = call(
        "neg",
        &[
            "--mode",
            "negative-prompt",
            "--negative-prompt",
            "noisy hiss",
            "--quality",
            "3",
        ],
    );
    assert!(neg.status.success());
    let plain = fs::read(ws.path("m1/sample_0000.qmdt")).unwrap();
    assert_ne!(fs::read(ws.path("m3/sample_0000.qmdt")).unwrap(), plain);

    let out = call("bad", &["--quality", "6"]);
    assert_eq!(out.status.code(), Some(2));
    let out = call("bad", &["--quality", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let out = call("bad", &["--mode", "loud"]);
    assert_eq!(out.status.code(), Some(2));
    // level 1 under quality mode falls back to plain guidance
    assert!(call("q1", &["--quality", "1"]).status.success());
}

#[test]
fn missing_checkpoint_is_a_one_line_failure() {
    let ws = Workspace::new();
    let out = qamdt(&[
        "sample",
        "--run",
        s(&ws.path("nope")),
        "--out",
        s(&ws.path("o")),
        "--caption",
        "x",
    ]);
    assert_eq!(out.status.code(), Some(1));
    one_line_error(&out);
}

#[test]
fn eval_metrics() {
    let ws = Workspace::new();
    let data = ws.synth("data");
    let latents = data.join("latents");
    let same = stdout_json(&ok(&["eval", "--a", s(&latents), "--b", s(&latents)]));
    assert!(same["frechet"].as_f64().unwrap().abs() < 1e-8);
    assert_eq!(same["a"]["count"], 40);
    assert_eq!(same["a"]["mean_noise_floor"], same["b"]["mean_noise_floor"]);

    // a shifted copy of the corpus
    let shifted = ws.path("shifted");
    fs::create_dir_all(&shifted).unwrap();
    for entry in fs::read_dir(&latents).unwrap() {
        let p = entry.unwrap().path();
        let t = qamdt_core::data::read_latent(&p).unwrap().map(|v| v + 1.0);
        qamdt_core::data::write_latent(&shifted.join(p.file_name().unwrap()), &t).unwrap();
    }
    let metrics_path = ws.path("metrics.json");
    let diff = stdout_json(&ok(&[
        "eval",
        "--a",
        s(&latents),
        "--b",
        s(&shifted),
        "--out",
        s(&metrics_path),
    ]));
    // the mean moves by 1 in each of 32 dimensions
    assert!(
        (diff["frechet"].as_f64().unwrap() - 32.0).abs() < 1e-3,
        "{diff}"
    );
    let saved: Value = serde_json::from_str(&fs::read_to_string(&metrics_path).unwrap()).unwrap();
    assert_eq!(saved, diff);
    let keys: Vec<&String> = diff.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["a", "b", "frechet"]);

    let empty = ws.path("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = qamdt(&["eval", "--a", s(&empty), "--b", s(&latents)]);
    assert_eq!(out.status.code(), Some(1));
    one_line_error(&out);
}

#[test]
fn refine_with_fixture_clients() {
    let ws = Workspace::new();
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/refine");
    let out = ws.path("refined.jsonl");
    let summary = stdout_json(&ok(&[
        "refine",
        "--manifest",
        s(&fixtures.join("input.jsonl")),
        "--out",
        s(&out),
        "--fixtures",
        s(&fixtures.join("mock.json")),
    ]));
    assert_eq!(
        fs::read_to_string(&out).unwrap(),
        fs::read_to_string(fixtures.join("expected.jsonl")).unwrap()
    );
    assert_eq!(summary["total"], 12);
    assert_eq!(summary["fused"], 3);

    // rerunning over the result changes nothing
    let again = ws.path("again.jsonl");
    let summary = stdout_json(&ok(&[
        "refine",
        "--manifest",
        s(&out),
        "--out",
        s(&again),
        "--fixtures",
        s(&fixtures.join("mock.json")),
    ]));
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());
    assert_eq!(summary["skipped"], 12);
}

#[test]
fn refined_synthetic_manifest_still_trains() {
    let ws = Workspace::new();
    let data = ws.synth("data");
    let manifest = data.join("manifest.jsonl");
    // fixtures with no entries: every captioner call fails, so originals are kept
    let fx = ws.path("empty.json");
    fs::write(&fx, "{}").unwrap();
    let refined = data.join("refined.jsonl");
    let summary = stdout_json(&ok(&[
        "refine",
        "--manifest",
        s(&manifest),
        "--out",
        s(&refined),
        "--fixtures",
        s(&fx),
    ]));
    assert_eq!(summary["failed"], 40);
    let line: Value = serde_json::from_str(
        fs::read_to_string(&refined)
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    assert!(line.get("latent").is_some() && line.get("pmos").is_some());
    let run = ws.path("run");
    ok(&[
        "train",
        "--config",
        &ws.config(),
        "--manifest",
        s(&refined),
        "--out",
        s(&run),
    ]);
}

#[test]
fn gradcheck_reports_json() {
    let out = qamdt(&["gradcheck", "--tolerance", "1"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = stdout_json(&out);
    assert!(report["params"].as_u64().unwrap() <= 50_000);
    assert!(report["max_rel_error"].as_f64().unwrap() < 1.0);
    assert_eq!(report["passed"], true);
    let out = qamdt(&["gradcheck", "--h", "0"]);
    assert_eq!(out.status.code(), Some(1));
    one_line_error(&out);
}

#[test]
fn help_lists_every_command() {
    let out = ok(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in [
        "synth",
        "stats",
        "refine",
        "train",
        "sample",
        "eval",
        "gradcheck",
    ] {
        assert!(text.contains(cmd), "{cmd}");
    }
}
