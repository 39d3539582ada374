use qamdt_core::data::{synth_dataset, SynthProfile};
use qamdt_core::diffusion::{NoiseSchedule, ScheduleConfig};
use qamdt_core::model::{ModelConfig, QaMdt};
use qamdt_core::numerics::Tensor;
use qamdt_core::quality::QualityLevel;
use qamdt_core::text::TextEncoder;
use qamdt_core::train::*;
use qamdt_core::Error;

fn schedule() -> NoiseSchedule {
    ScheduleConfig::default().build().unwrap()
}

fn examples(n: usize, seed: u64) -> Vec<TrainingExample> {
    let model = QaMdt::init(ModelConfig::default(), 0).unwrap();
    let enc = model.text_encoder().clone();
    synth_dataset(n, &SynthProfile::default(), seed)
        .unwrap()
        .into_iter()
        .map(|r| TrainingExample {
            text: enc.encode(Some(&r.record.caption.original_caption)),
            latent: r.latent,
            level: r.level,
        })
        .collect()
}

fn steps(n: usize) -> TrainConfig {
    TrainConfig {
        steps: n,
        ..Default::default()
    }
}

#[test]
fn fresh_model_loss_is_the_noise_variance() {
    // a zero-initialized output layer predicts 0, so the loss is E[eps^2]
    let sched = schedule();
    let data = examples(50, 1);
    let cfg = TrainConfig {
        batch: 32,
        ..steps(1)
    };
    let mut trainer = Trainer::new(
        QaMdt::init(ModelConfig::default(), 3).unwrap(),
        &sched,
        cfg,
        4,
    )
    .unwrap();
    let loss = trainer.step(&data).unwrap();
    // 32 draws of 256 standard normals: std of the mean square is sqrt(2 / 8192)
    assert!((loss - 1.0).abs() < 0.08, "{loss}");
}

#[test]
fn loss_decreases_over_two_hundred_steps() {
    let sched = schedule();
    let data = examples(200, 2);
    let model = QaMdt::init(ModelConfig::default(), 5).unwrap();
    let (_, losses) = train(model, &sched, &data, steps(200), 6).unwrap();
    assert_eq!(losses.len(), 200);
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.8 * head, "head {head}, tail {tail}");
}

#[test]
fn training_is_deterministic_per_seed() {
    let sched = schedule();
    let data = examples(30, 3);
    let run = |seed| {
        let model = QaMdt::init(ModelConfig::default(), 1).unwrap();
        train(model, &sched, &data, steps(4), seed).unwrap()
    };
    let (a, la) = run(9);
    let (b, lb) = run(9);
    let (c, lc) = run(10);
    assert_eq!(la, lb);
    assert_eq!(a.params(), b.params());
    assert_ne!(la, lc);
    assert_ne!(a.params(), c.params());
}

#[test]
fn parameters_stay_single_precision() {
    let sched = schedule();
    let data = examples(10, 4);
    let model = QaMdt::init(ModelConfig::default(), 2).unwrap();
    let (model, _) = train(model, &sched, &data, steps(2), 1).unwrap();
    for (name, t) in model.params().iter() {
        for &v in t.data() {
            assert_eq!(f64::from(v as f32), v, "{name}");
        }
    }
}

#[test]
fn non_finite_loss_aborts_with_the_step() {
    let sched = schedule();
    let mut data = examples(5, 5);
    for ex in &mut data {
        ex.latent = Tensor::full(ex.latent.shape(), f64::NAN);
    }
    let mut trainer = Trainer::new(
        QaMdt::init(ModelConfig::default(), 0).unwrap(),
        &sched,
        steps(3),
        0,
    )
    .unwrap();
    match trainer.run(&data, |_, _| {}) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("step 0"), "{msg}"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
    assert_eq!(trainer.step_count(), 0);
}

#[test]
fn empty_training_set_is_rejected() {
    let sched = schedule();
    let mut trainer = Trainer::new(
        QaMdt::init(ModelConfig::default(), 0).unwrap(),
        &sched,
        steps(1),
        0,
    )
    .unwrap();
    assert!(trainer.step(&[]).is_err());
}

#[test]
fn step_callback_sees_every_step() {
    let sched = schedule();
    let data = examples(10, 6);
    let mut trainer = Trainer::new(
        QaMdt::init(ModelConfig::default(), 0).unwrap(),
        &sched,
        steps(3),
        0,
    )
    .unwrap();
    let mut seen = vec![];
    let losses = trainer.run(&data, |s, l| seen.push((s, l))).unwrap();
    assert_eq!(seen.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert_eq!(seen.iter().map(|p| p.1).collect::<Vec<_>>(), losses);
    assert_eq!(trainer.step_count(), 3);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            batch: 0,
            ..Default::default()
        },
        TrainConfig {
            lr: 0.0,
            ..Default::default()
        },
        TrainConfig {
            lr: f64::NAN,
            ..Default::default()
        },
        TrainConfig {
            gamma: 1.0,
            ..Default::default()
        },
        TrainConfig {
            p_uncond: 1.5,
            ..Default::default()
        },
        TrainConfig {
            beta1: 1.0,
            ..Default::default()
        },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    let err = serde_json::from_str::<TrainConfig>(
        r#"{"steps":1,"batch":1,"lr":0.1,"gamma":0.3,"p_uncond":0.1,"beta1":0.9,"beta2":0.999,"adam_eps":1e-8,"typo":1}"#,
    );
    assert!(err.is_err());
}

#[test]
fn condition_dropout_keeps_training_all_levels() {
    // with every caption dropped the model still sees each quality level
    let sched = schedule();
    let data = examples(10, 7);
    assert!(QualityLevel::all().all(|q| data.iter().any(|e| e.level == q)));
    let cfg = TrainConfig {
        p_uncond: 1.0,
        ..steps(2)
    };
    let model = QaMdt::init(ModelConfig::default(), 0).unwrap();
    let (_, losses) = train(model, &sched, &data, cfg, 0).unwrap();
    assert!(losses.iter().all(|l| l.is_finite()));
}
