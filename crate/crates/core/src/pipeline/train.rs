//! Optimizer, learning-rate schedule and the training loop.

use std::f64::consts::PI;
use std::sync::mpsc::sync_channel;
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{example_seed, DataConfig, Stream};
use crate::assignment::ot_couple;
use crate::eqnet::VelocityModel;
use crate::error::{Error, Result};
use crate::flowpath::FlowPair;
use crate::losses::{pet_step_tape, AssignRule, LossConfig, LossCounters};
use crate::noiseshape::NoiseConfig;
use crate::tensor::{ParamStore, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Batches buffered ahead of the optimizer.
    pub queue_depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 8,
            lr: 1e-4,
            warmup_frac: 0.1,
            weight_decay: 0.01,
            ema_decay: 0.999,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            queue_depth: 4,
        }
    }
}

impl TrainConfig {
    pub fn warmup_steps(&self) -> usize {
        ((self.steps as f64 * self.warmup_frac).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.batch_size == 0 || self.queue_depth == 0 {
            return bad("steps, batch_size and queue_depth must be positive".into());
        }
        if self.warmup_steps() >= self.steps {
            return bad(format!("warmup of {} steps must be shorter than {} steps", self.warmup_steps(), self.steps));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) || !(self.eps > 0.0) {
            return bad("lr, clip_norm and eps must be positive, weight_decay non-negative".into());
        }
        for (name, v) in [("ema_decay", self.ema_decay), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        Ok(())
    }

    /// Learning rate of step `step` (1-based): linear from 0, then cosine to 0.
    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.warmup_steps();
        if step <= w {
            return self.lr * step as f64 / w as f64;
        }
        let p = (step - w) as f64 / (self.steps - w) as f64;
        0.5 * self.lr * (1.0 + (PI * p.min(1.0)).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                *p -= lr * (update + cfg.weight_decay * *p);
            }
        }
    }
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// One optimizer step of the loss curve.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    /// Mean loss over the non-skipped examples of the batch.
    pub loss: f64,
    pub grad_norm: f64,
    pub used: usize,
    pub counters: LossCounters,
}

pub fn loss_csv(log: &[StepLog]) -> String {
    let mut out = String::from("step,lr,loss,grad_norm,used,skipped,clamped\n");
    for s in log {
        out.push_str(&format!(
            "{},{:.9e},{:.9},{:.9},{},{},{}\n",
            s.step, s.lr, s.loss, s.grad_norm, s.used, s.counters.skipped, s.counters.clamped
        ));
    }
    out
}

/// Everything the training loop needs besides the model.
#[derive(Clone, Debug)]
pub struct TrainSetup<'a> {
    pub data: &'a DataConfig,
    pub noise: &'a NoiseConfig,
    pub loss: &'a LossConfig,
    /// Conditioning weight of the batch OT coupling.
    pub ot_beta: f64,
    pub train: &'a TrainConfig,
    pub sample_rate: u32,
}

type Batch = (usize, Vec<(u64, FlowPair)>);

fn couple(batch: Vec<(u64, FlowPair)>, beta: f64) -> Result<Vec<(u64, FlowPair)>> {
    let x0: Vec<_> = batch.iter().map(|(_, p)| p.x0.clone()).collect();
    let x1: Vec<_> = batch.iter().map(|(_, p)| p.x1.clone()).collect();
    let cond: Vec<_> = batch.iter().map(|(_, p)| p.cond.clone()).collect();
    let plan = ot_couple(&x0, &x1, &cond, beta)?;
    Ok(plan
        .pairs
        .iter()
        .map(|(i, j, perm)| {
            let (seed, a) = &batch[*i];
            let b = &batch[*j].1;
            (*seed, FlowPair { x0: a.x0.clone(), x1: perm.apply(&b.x1), cond: a.cond.clone(), noise: a.noise.clone() })
        })
        .collect())
}

/// Trains `model` in place. `on_step` sees every logged step as it completes.
pub fn train(model: &mut VelocityModel, setup: &TrainSetup<'_>, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
    let cfg = setup.train;
    cfg.validate()?;
    setup.loss.weighting.validate()?;
    setup.data.validate(setup.sample_rate)?;
    let mut opt = AdamW::new(model.params());
    let mut log = Vec::with_capacity(cfg.steps);
    let mut counters = LossCounters::default();

    thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<Batch>>(cfg.queue_depth);
        scope.spawn(move || {
            for step in 1..=cfg.steps {
                let batch: Result<Vec<_>> = (0..cfg.batch_size)
                    .map(|i| {
                        let seed = example_seed(cfg.seed, Stream::Train, step * cfg.batch_size + i);
                        setup.data.example(setup.noise, setup.sample_rate, seed).map(|p| (seed, p))
                    })
                    .collect();
                let stop = batch.is_err();
                if tx.send(batch.map(|b| (step, b))).is_err() || stop {
                    return;
                }
            }
        });

        for received in rx.iter() {
            let (step, mut batch) = received?;
            let seeds: Vec<u64> = batch.iter().map(|(s, _)| *s).collect();
            if setup.loss.assignment == AssignRule::Ot {
                batch = couple(batch, setup.ot_beta)?;
            }
            let fail = |e: Error| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}; batch seeds {seeds:?}")),
                other => other,
            };
            let mut grads: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
            let mut total = 0.0;
            let mut used = 0usize;
            for (seed, pair) in &batch {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
                let mut tape = Tape::new();
                let bound = model.params().bind(&mut tape, true);
                let Some((loss, out)) = pet_step_tape(model, &mut tape, &bound, pair, setup.loss, &mut rng, &mut counters).map_err(fail)?
                else {
                    continue;
                };
                tape.backward(loss).map_err(fail)?;
                for (acc, g) in grads.iter_mut().zip(bound.grads(&tape)) {
                    acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                total += out.loss;
                used += 1;
            }
            let lr = cfg.lr_at(step);
            let mut grad_norm = 0.0;
            if used > 0 {
                let inv = 1.0 / used as f64;
                grads.iter_mut().flatten().for_each(|g| *g *= inv);
                if grads.iter().flatten().any(|g| !g.is_finite()) {
                    return Err(fail(Error::NonFinite("gradient".into())));
                }
                grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
                opt.step(model.params_mut(), &grads, lr, cfg);
            }
            model.update_ema(cfg.ema_decay);
            let entry = StepLog { step, lr, loss: if used > 0 { total / used as f64 } else { f64::NAN }, grad_norm, used, counters };
            on_step(&entry);
            log.push(entry);
        }
        Ok(())
    })?;
    if log.len() != cfg.steps {
        return Err(Error::invalid(format!("training stopped after {} of {} steps", log.len(), cfg.steps)));
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eqnet::NetConfig;
    use crate::tensor::Tensor;

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig { steps: 1000, ..Default::default() };
        assert_eq!(cfg.warmup_steps(), 100);
        assert_eq!(cfg.lr_at(100), 1e-4);
        assert!((cfg.lr_at(50) - 5e-5).abs() < 1e-18);
        assert!(cfg.lr_at(1000).abs() < 1e-20);
        assert!(cfg.lr_at(999) < 1e-8);
        assert!((cfg.lr_at(550) - 5e-5).abs() < 1e-15);
        assert!(TrainConfig { steps: 5, warmup_frac: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn adamw_first_step_matches_closed_form() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let cfg = TrainConfig::default();
        let mut opt = AdamW::new(&store);
        let g = vec![vec![0.3, -0.1, 0.0]];
        opt.step(&mut store, &g, 0.01, &cfg);
        let want: Vec<f64> = [1.0f64, -2.0, 0.5]
            .iter()
            .zip(&g[0])
            .map(|(p, g)| {
                let u = if *g == 0.0 { 0.0 } else { g / (g.abs() + cfg.eps) };
                p - 0.01 * (u + 0.01 * p)
            })
            .collect();
        for (a, b) in store.get(0).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0, 0.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn ema_is_exact() {
        let mut model = VelocityModel::new(NetConfig::tiny()).unwrap();
        let before = model.params().clone();
        for _ in 0..50 {
            model.update_ema(0.999);
        }
        assert_eq!(model.ema().tensors(), before.tensors());

        model.perturb(3, 0.1);
        let e = model.ema().clone();
        for t in model.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.25);
        }
        let p = model.params().clone();
        model.update_ema(0.999);
        for ((a, e), p) in model.ema().tensors().iter().zip(e.tensors()).zip(p.tensors()) {
            for ((a, e), p) in a.data().iter().zip(e.data()).zip(p.data()) {
                assert!((a - (0.999 * e + 0.001 * p)).abs() <= 1e-15 * p.abs().max(1.0));
            }
        }
    }
}
