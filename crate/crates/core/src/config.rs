//! Run configuration: one TOML file with `data`, `model`, `loss`, `noise`,
//! `train` and `sample` sections. Every key has a default.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eqnet::NetConfig;
use crate::error::{Error, Result};
use crate::losses::{AssignRule, Denominator, LossConfig, LossKind, TimeWeighting};
use crate::noiseshape::NoiseConfig;
use crate::pipeline::{DataConfig, EvalSetup, TrainConfig, TrainSetup};
use crate::sampler::{make_schedule, Schedule, ScheduleKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub loss: LossKind,
    /// `half_delta`, `mostly_uniform` or `snr_uniform`.
    pub time_weighting: String,
    pub p0: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub denominator: Denominator,
    pub assignment: AssignRule,
    pub pit_max: usize,
    pub ot_beta: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            loss: LossKind::Db,
            time_weighting: "snr_uniform".into(),
            p0: 0.01,
            r_min: -80.0,
            r_max: 100.0,
            denominator: Denominator::Unpermuted,
            assignment: AssignRule::Pit,
            pit_max: 4,
            ot_beta: 1e4,
        }
    }
}

impl LossSection {
    pub fn to_config(&self) -> Result<LossConfig> {
        let weighting = match TimeWeighting::from_name(&self.time_weighting, self.p0)? {
            TimeWeighting::SnrUniform { p0, .. } => TimeWeighting::SnrUniform { p0, r_min: self.r_min, r_max: self.r_max },
            w => w,
        };
        weighting.validate()?;
        Ok(LossConfig {
            kind: self.loss,
            weighting,
            denominator: self.denominator,
            assignment: self.assignment,
            pit_max: self.pit_max,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    #[serde(with = "schedule_str")]
    pub schedule: ScheduleKind,
    /// Sample with the EMA weights rather than the raw ones.
    pub use_ema: bool,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { schedule: ScheduleKind::Linear(25), use_ema: true, seed: 0 }
    }
}

mod schedule_str {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    use crate::sampler::ScheduleKind;

    pub fn serialize<S: Serializer>(k: &ScheduleKind, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&k.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ScheduleKind, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: NetConfig,
    pub loss: LossSection,
    pub noise: NoiseConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
        Self::parse(&text).map_err(|e| e.at(path))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate(self.model.sample_rate)?;
        self.loss.to_config()?;
        if !(self.loss.ot_beta > 0.0) {
            return Err(Error::Config(format!("ot_beta must be positive, got {}", self.loss.ot_beta)));
        }
        if self.loss.assignment == AssignRule::Pit && self.data.n_sources > self.loss.pit_max {
            return Err(Error::Config(format!(
                "PIT over {} sources exceeds pit_max = {}; use assignment = \"euclidean\"",
                self.data.n_sources, self.loss.pit_max
            )));
        }
        self.noise.validate()?;
        self.train.validate()?;
        make_schedule(self.sample.schedule)?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        make_schedule(self.sample.schedule)
    }

    /// Borrowed training view; the loss section must already be valid.
    pub fn train_setup<'a>(&'a self, loss: &'a LossConfig) -> TrainSetup<'a> {
        TrainSetup {
            data: &self.data,
            noise: &self.noise,
            loss,
            ot_beta: self.loss.ot_beta,
            train: &self.train,
            sample_rate: self.model.sample_rate,
        }
    }

    pub fn eval_setup<'a>(&'a self, schedule: &'a Schedule, threads: usize) -> EvalSetup<'a> {
        EvalSetup {
            data: &self.data,
            noise: &self.noise,
            schedule,
            sample_rate: self.model.sample_rate,
            seed: self.sample.seed,
            threads,
        }
    }
}
