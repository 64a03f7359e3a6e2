//! Separation of a held-out set and SI-SDR scoring.

use std::thread;

use super::{example_seed, DataConfig, Stream};
use crate::eqnet::VelocityModel;
use crate::error::Result;
use crate::geometry::mix;
use crate::metrics::{baseline_score, best_perm_score, ScoreReport, ScoreRow};
use crate::noiseshape::NoiseConfig;
use crate::sampler::{separate, Schedule};

/// Sampling settings of an evaluation.
#[derive(Clone, Debug)]
pub struct EvalSetup<'a> {
    pub data: &'a DataConfig,
    pub noise: &'a NoiseConfig,
    pub schedule: &'a Schedule,
    pub sample_rate: u32,
    pub seed: u64,
    pub threads: usize,
}

fn score_one(model: &VelocityModel, setup: &EvalSetup<'_>, id: usize) -> Result<ScoreRow> {
    let pair = setup.data.example(setup.noise, setup.sample_rate, example_seed(setup.data.eval_seed, Stream::Eval, id))?;
    let mixture = mix(&pair.x1)?;
    let shaper = setup.noise.shaper(pair.cond.mean(), setup.sample_rate)?;
    let est = separate(model, &mixture, pair.k(), &shaper, setup.schedule, example_seed(setup.seed, Stream::Sample, id))?;
    Ok(ScoreRow { id, score: best_perm_score(&est, &pair.x1)?, baseline: baseline_score(&mixture, &pair.x1)? })
}

/// Scores `model` on the evaluation set, spreading mixtures over threads.
pub fn evaluate(model: &VelocityModel, setup: &EvalSetup<'_>) -> Result<ScoreReport> {
    let n = setup.data.n_eval;
    let threads = setup.threads.clamp(1, n.max(1));
    let mut rows: Vec<ScoreRow> = thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| scope.spawn(move || (w..n).step_by(threads).map(|id| score_one(model, setup, id)).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect::<Result<Vec<_>>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    rows.sort_by_key(|r| r.id);
    Ok(ScoreReport { rows })
}
