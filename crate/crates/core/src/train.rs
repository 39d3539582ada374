//! Denoising training loop.
//!
//! Each step draws a batch of examples, a timestep, noise and a random patch
//! mask per example, replaces the caption by the null condition with
//! probability `p_uncond` (the quality token is kept), and applies one Adam
//! update on the mean loss. Parameters are rounded to `f32` after every
//! update so checkpoints reproduce the in-memory model exactly.

use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_diffuse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{round_to_f32, Conditioning, QaMdt};
use crate::numerics::{seeded_normal, Graph, ParamStore, Rng, Tensor};
use crate::patch::make_mask;
use crate::quality::QualityLevel;
use crate::text::TextEmbedding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Mask ratio γ.
    pub gamma: f64,
    /// Probability of replacing the caption by `∅`.
    pub p_uncond: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            lr: 1e-3,
            gamma: 0.3,
            p_uncond: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must be in [0, 1), got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return bad(format!("p_uncond must be in [0, 1], got {}", self.p_uncond));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.adam_eps <= 0.0
        {
            return bad("invalid Adam hyperparameters".into());
        }
        Ok(())
    }
}

/// One training pair: a clean latent with its caption embedding and level.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub latent: Tensor,
    pub text: TextEmbedding,
    pub level: QualityLevel,
}

struct Adam {
    m: ParamStore,
    v: ParamStore,
    t: i32,
}

impl Adam {
    fn new(params: &ParamStore) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &ParamStore,
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?.data();
            let m = self.m.get_mut(name)?.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = self.v.get_mut(name)?.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let m = self.m.get(name)?.data();
            let v = self.v.get(name)?.data();
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                *pi -= cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.adam_eps);
            }
        }
        Ok(())
    }
}

/// Stateful trainer; the RNG stream is fully determined by `seed`.
pub struct Trainer<'a> {
    model: QaMdt,
    sched: &'a NoiseSchedule,
    cfg: TrainConfig,
    adam: Adam,
    rng: Rng,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        mut model: QaMdt,
        sched: &'a NoiseSchedule,
        cfg: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        round_to_f32(model.params_mut());
        let adam = Adam::new(model.params());
        Ok(Self {
            model,
            sched,
            cfg,
            adam,
            rng: Rng::new(seed),
            step: 0,
        })
    }

    pub fn model(&self) -> &QaMdt {
        &self.model
    }

    pub fn into_model(self) -> QaMdt {
        self.model
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Mean loss and gradient over one freshly drawn batch, without updating.
    pub fn batch_gradient(&mut self, data: &[TrainingExample]) -> Result<(f64, ParamStore)> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let t_max = self.sched.len();
        let p = self.model.num_patches();
        let mut total = self.model.params().zeros_like();
        let mut loss_sum = 0.0;
        for _ in 0..self.cfg.batch {
            let ex = &data[self.rng.below(data.len())];
            let t = self.rng.range_inclusive(1, t_max);
            let eps = seeded_normal(&mut self.rng, ex.latent.shape())?;
            let mask = make_mask(p, self.cfg.gamma, &mut self.rng)?;
            let drop = self.rng.uniform() < self.cfg.p_uncond;
            let text = if drop { &TextEmbedding::Null } else { &ex.text };
            let z_t = forward_diffuse(&ex.latent, t, &eps, self.sched)?;
            let c = Conditioning {
                t,
                level: ex.level,
                text,
            };

            let mut g = Graph::new();
            let b = g.bind(self.model.params().iter());
            let loss = self.model.loss_graph(&mut g, &b, &z_t, &eps, &c, &mask)?;
            loss_sum += g.value(loss).data()[0];
            let mut grads = g.backward(loss)?;
            for (name, &v) in b.iter() {
                let gv = grads.take(v);
                let acc = total.get_mut(name)?;
                for (a, x) in acc.data_mut().iter_mut().zip(gv.data()) {
                    *a += x;
                }
            }
        }
        let n = self.cfg.batch as f64;
        for (_, t) in total.iter_mut() {
            for v in t.data_mut() {
                *v /= n;
            }
        }
        Ok((loss_sum / n, total))
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn step(&mut self, data: &[TrainingExample]) -> Result<f64> {
        let (loss, grads) = self.batch_gradient(data)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.step)));
        }
        self.adam
            .update(self.model.params_mut(), &grads, &self.cfg)?;
        round_to_f32(self.model.params_mut());
        if !self.model.params().all_finite() {
            return Err(Error::NonFinite(format!(
                "parameters after step {}",
                self.step
            )));
        }
        self.step += 1;
        Ok(loss)
    }

    /// Runs the configured number of steps, reporting `(step, loss)` as it goes.
    pub fn run(
        &mut self,
        data: &[TrainingExample],
        mut on_step: impl FnMut(usize, f64),
    ) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(self.cfg.steps);
        for _ in 0..self.cfg.steps {
            let step = self.step;
            let loss = self.step(data)?;
            on_step(step, loss);
            losses.push(loss);
        }
        Ok(losses)
    }
}

/// Trains `model` on `data` and returns it with the per-step losses.
pub fn train(
    model: QaMdt,
    sched: &NoiseSchedule,
    data: &[TrainingExample],
    cfg: TrainConfig,
    seed: u64,
) -> Result<(QaMdt, Vec<f64>)> {
    let mut trainer = Trainer::new(model, sched, cfg, seed)?;
    let losses = trainer.run(data, |_, _| {})?;
    Ok((trainer.into_model(), losses))
}
