//! Grid of training and sampling settings scored on the evaluation set.

use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::eqnet::VelocityModel;
use crate::error::{Error, Result};
use crate::losses::{pet_step_tape, AssignRule, LossCounters, LossKind};
use crate::noiseshape::NoiseKind;
use crate::pipeline::{evaluate, loss_csv, train};
use crate::sampler::{make_schedule, ScheduleKind};
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Loss,
    TimeWeighting,
    Noise,
    Schedule,
    Assignment,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(Axis::Loss),
            "time_weighting" => Ok(Axis::TimeWeighting),
            "noise" => Ok(Axis::Noise),
            "schedule" => Ok(Axis::Schedule),
            "assignment" => Ok(Axis::Assignment),
            _ => Err(Error::Config(format!(
                "unknown ablation axis '{s}' (loss|time_weighting|noise|schedule|assignment)"
            ))),
        }
    }
}

impl Axis {
    fn apply(&self, cfg: &mut RunConfig, level: usize) {
        match self {
            Axis::Loss => cfg.loss.loss = [LossKind::Raw, LossKind::Normalized, LossKind::Db][level],
            Axis::TimeWeighting => cfg.loss.time_weighting = ["half_delta", "mostly_uniform", "snr_uniform"][level].into(),
            Axis::Noise => cfg.noise.kind = [NoiseKind::Constant, NoiseKind::ActivePower, NoiseKind::Envelope][level],
            Axis::Schedule => {
                cfg.sample.schedule = [ScheduleKind::Linear(25), ScheduleKind::Custom5, ScheduleKind::Single][level]
            }
            Axis::Assignment => {
                cfg.loss.assignment = [AssignRule::Pit, AssignRule::Euclidean, AssignRule::Ot][level]
            }
        }
    }
}

const LEVELS: usize = 3;

/// Every combination of the levels of `axes`, applied on top of `base`.
pub fn ablation_grid(base: &RunConfig, axes: &[Axis]) -> Result<Vec<RunConfig>> {
    for (i, a) in axes.iter().enumerate() {
        if axes[..i].contains(a) {
            return Err(Error::Config(format!("axis {a:?} listed twice")));
        }
    }
    let mut grid = vec![base.clone()];
    for axis in axes {
        grid = grid
            .into_iter()
            .flat_map(|cfg| {
                (0..LEVELS).map(move |level| {
                    let mut c = cfg.clone();
                    axis.apply(&mut c, level);
                    c
                })
            })
            .collect();
    }
    for cfg in &grid {
        cfg.validate()?;
    }
    Ok(grid)
}

/// One line of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub config: RunConfig,
    pub sisdr: f64,
    pub baseline: f64,
}

pub fn table_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("loss,time_weighting,noise,schedule,assignment,sisdr,baseline\n");
    for r in rows {
        let c = &r.config;
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6}\n",
            c.loss.loss.as_str(),
            c.loss.time_weighting,
            c.noise.kind.as_str(),
            c.sample.schedule,
            c.loss.assignment.as_str(),
            r.sisdr,
            r.baseline
        ));
    }
    out
}

/// Seconds of one training example, measured on the first grid entry.
fn seconds_per_example(cfg: &RunConfig) -> Result<f64> {
    let loss = cfg.loss.to_config()?;
    let model = VelocityModel::new(cfg.model.clone())?;
    let pair = cfg.data.example(&cfg.noise, cfg.model.sample_rate, 0)?;
    let start = Instant::now();
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let mut counters = LossCounters::default();
    if let Some((l, _)) = pet_step_tape(&model, &mut tape, &bound, &pair, &loss, &mut ChaCha8Rng::seed_from_u64(0), &mut counters)? {
        tape.backward(l)?;
    }
    Ok(start.elapsed().as_secs_f64())
}

/// Trains one model per distinct training setting and scores it under every
/// schedule of the grid. Rows follow the grid order.
pub fn run_ablation(
    base: &RunConfig,
    axes: &[Axis],
    threads: usize,
    budget_hours: f64,
    runs_dir: Option<&Path>,
    mut progress: impl FnMut(&str),
) -> Result<Vec<AblationRow>> {
    let grid = ablation_grid(base, axes)?;
    let mut trainings: Vec<RunConfig> = Vec::new();
    for cfg in &grid {
        let mut key = cfg.clone();
        key.sample = base.sample.clone();
        if !trainings.contains(&key) {
            trainings.push(key);
        }
    }
    let per_example = seconds_per_example(&trainings[0])?;
    let examples: usize = trainings.iter().map(|c| c.train.steps * c.train.batch_size).sum();
    let hours = per_example * examples as f64 * 1.3 / 3600.0;
    if hours > budget_hours {
        return Err(Error::Config(format!(
            "grid of {} rows needs {} trainings, estimated {hours:.1} h (budget {budget_hours} h); \
             drop axes or reduce train.steps",
            grid.len(),
            trainings.len()
        )));
    }
    progress(&format!("{} rows, {} trainings, estimated {:.1} h", grid.len(), trainings.len(), hours));

    let mut rows = Vec::with_capacity(grid.len());
    for (i, tcfg) in trainings.iter().enumerate() {
        let loss = tcfg.loss.to_config()?;
        let mut model = VelocityModel::new(tcfg.model.clone())?;
        let log = train(&mut model, &tcfg.train_setup(&loss), |_| {})?;
        if let Some(dir) = runs_dir {
            let d = dir.join(format!("run{i:02}"));
            fs::create_dir_all(&d)?;
            fs::write(d.join("loss.csv"), loss_csv(&log))?;
            fs::write(d.join("config.toml"), tcfg.to_toml())?;
        }
        for (gi, cfg) in grid.iter().enumerate().filter(|(_, c)| {
            let mut key = (*c).clone();
            key.sample = base.sample.clone();
            &key == tcfg
        }) {
            model.set_use_ema(cfg.sample.use_ema);
            let schedule = make_schedule(cfg.sample.schedule)?;
            let report = evaluate(&model, &cfg.eval_setup(&schedule, threads))?;
            progress(&format!(
                "loss={} time_weighting={} noise={} schedule={} assignment={}: {:.3} dB (baseline {:.3} dB)",
                cfg.loss.loss.as_str(),
                cfg.loss.time_weighting,
                cfg.noise.kind.as_str(),
                cfg.sample.schedule,
                cfg.loss.assignment.as_str(),
                report.mean(),
                report.baseline_mean()
            ));
            rows.push((gi, AblationRow { config: cfg.clone(), sisdr: report.mean(), baseline: report.baseline_mean() }));
        }
    }
    rows.sort_by_key(|(i, _)| *i);
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        let base = RunConfig::default();
        assert_eq!(ablation_grid(&base, &[]).unwrap(), vec![base.clone()]);
        let g = ablation_grid(&base, &[Axis::Loss]).unwrap();
        assert_eq!(g.iter().map(|c| c.loss.loss).collect::<Vec<_>>(), [LossKind::Raw, LossKind::Normalized, LossKind::Db]);
        assert_eq!(ablation_grid(&base, &[Axis::Noise, Axis::Schedule, Axis::Assignment]).unwrap().len(), 27);
        assert!(ablation_grid(&base, &[Axis::Loss, Axis::Loss]).is_err());
        assert!("lambda".parse::<Axis>().is_err());
    }

    #[test]
    fn oversized_grid_is_refused_with_estimate() {
        let base = RunConfig { model: crate::eqnet::NetConfig::tiny(), ..Default::default() };
        let axes = [Axis::Loss, Axis::TimeWeighting, Axis::Noise, Axis::Assignment];
        let err = run_ablation(&base, &axes, 1, 0.01, None, |_| {}).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("81 trainings"), "{err}");
    }
}
