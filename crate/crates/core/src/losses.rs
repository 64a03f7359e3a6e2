//! Flow-matching losses under a source permutation, time sampling and the
//! per-example training step.
//!
//! The assignment is decided at `t = 0` and reused at the sampled time. The
//! normalized loss divides by `||x1 - x0||^2` and the dB loss is its
//! logarithm; neither the assignment nor the denominator carries gradient.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{euclidean_assign, pit_from_drift, Permutation};
use crate::eqnet::VelocityModel;
use crate::error::{Error, Result};
use crate::flowpath::{interpolate_stacks, wrap_drift, FlowPair, FlowState, VelocityField};
use crate::geometry::{project_perp, Stack};
use crate::tensor::{grad_check, Bound, GradCheckReport, Tape, Tensor, Var};

/// Smallest normalized loss passed to the logarithm.
pub const DB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Raw,
    Normalized,
    Db,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(LossKind::Raw),
            "normalized" => Ok(LossKind::Normalized),
            "db" => Ok(LossKind::Db),
            _ => Err(Error::Config(format!("unknown loss '{s}' (raw|normalized|db)"))),
        }
    }
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Raw => "raw",
            LossKind::Normalized => "normalized",
            LossKind::Db => "db",
        }
    }
}

/// Which target norm divides the normalized loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// `||x1 - x0||^2`.
    #[default]
    Unpermuted,
    /// `||pi x1 - x0||^2`.
    Permuted,
}

/// How the source ordering of the target is chosen for each example.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignRule {
    /// Loss-minimizing ordering at `t = 0`.
    #[default]
    Pit,
    /// Ordering of `x1` closest to `x0`.
    Euclidean,
    /// Batch-level conditional OT coupling, decided before the step.
    Ot,
}

impl FromStr for AssignRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pit" => Ok(AssignRule::Pit),
            "euclidean" => Ok(AssignRule::Euclidean),
            "ot" => Ok(AssignRule::Ot),
            _ => Err(Error::Config(format!("unknown assignment '{s}' (pit|euclidean|ot)"))),
        }
    }
}

impl AssignRule {
    pub fn as_str(&self) -> &'static str {
        match self {
            AssignRule::Pit => "pit",
            AssignRule::Euclidean => "euclidean",
            AssignRule::Ot => "ot",
        }
    }
}

/// Distribution of training times.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeWeighting {
    /// `t = 0` with probability one half, otherwise uniform.
    HalfDelta,
    /// `t = 0` with probability `p0`, otherwise uniform.
    MostlyUniform { p0: f64 },
    /// `t = 0` with probability `p0`, otherwise `t = 1 / (1 + 10^(-r/20))`
    /// with `r` uniform in `[r_min, r_max]` dB.
    SnrUniform { p0: f64, r_min: f64, r_max: f64 },
}

impl Default for TimeWeighting {
    fn default() -> Self {
        TimeWeighting::SnrUniform { p0: 0.01, r_min: -80.0, r_max: 100.0 }
    }
}

impl TimeWeighting {
    /// Builds a weighting from its config name and `p0`.
    pub fn from_name(name: &str, p0: f64) -> Result<Self> {
        let w = match name {
            "half_delta" => TimeWeighting::HalfDelta,
            "mostly_uniform" => TimeWeighting::MostlyUniform { p0 },
            "snr_uniform" => TimeWeighting::SnrUniform { p0, r_min: -80.0, r_max: 100.0 },
            _ => {
                return Err(Error::Config(format!(
                    "unknown time weighting '{name}' (half_delta|mostly_uniform|snr_uniform)"
                )))
            }
        };
        w.validate()?;
        Ok(w)
    }

    pub fn name(&self) -> &'static str {
        match self {
            TimeWeighting::HalfDelta => "half_delta",
            TimeWeighting::MostlyUniform { .. } => "mostly_uniform",
            TimeWeighting::SnrUniform { .. } => "snr_uniform",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p0 = match *self {
            TimeWeighting::HalfDelta => 0.5,
            TimeWeighting::MostlyUniform { p0 } => p0,
            TimeWeighting::SnrUniform { p0, r_min, r_max } => {
                if !(r_min < r_max) {
                    return Err(Error::Config(format!("r_min {r_min} must be below r_max {r_max}")));
                }
                p0
            }
        };
        if !(p0 > 0.0 && p0 < 1.0) {
            return Err(Error::Config(format!("p0 must lie in (0, 1), got {p0}")));
        }
        Ok(())
    }
}

/// `t = 1 / (1 + 10^(-r/20))`.
pub fn snr_to_time(r: f64) -> f64 {
    1.0 / (1.0 + 10f64.powf(-r / 20.0))
}

pub fn sample_time<R: Rng + ?Sized>(w: &TimeWeighting, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    match *w {
        TimeWeighting::HalfDelta => {
            if u < 0.5 {
                0.0
            } else {
                rng.random()
            }
        }
        TimeWeighting::MostlyUniform { p0 } => {
            if u < p0 {
                0.0
            } else {
                rng.random()
            }
        }
        TimeWeighting::SnrUniform { p0, r_min, r_max } => {
            if u < p0 {
                0.0
            } else {
                snr_to_time(rng.random_range(r_min..r_max))
            }
        }
    }
}

/// Loss settings of one training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub weighting: TimeWeighting,
    pub denominator: Denominator,
    pub assignment: AssignRule,
    /// Largest `K` for which PIT enumerates all orderings.
    pub pit_max: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Db,
            weighting: TimeWeighting::default(),
            denominator: Denominator::Unpermuted,
            assignment: AssignRule::Pit,
            pit_max: 4,
        }
    }
}

/// Degenerate-sample bookkeeping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LossCounters {
    /// Samples dropped because `x1 = x0`.
    pub skipped: u64,
    /// dB losses clamped at the floor.
    pub clamped: u64,
}

/// `||v - (pi x1 - x0)||^2`.
pub fn raw_from_drift(v: &Stack, pair: &FlowPair, perm: &Permutation) -> Result<f64> {
    let x1 = perm.apply(&pair.x1);
    v.check_same_shape(&x1)?;
    let mut acc = 0.0;
    for ((vi, a), b) in v.as_slice().iter().zip(x1.as_slice()).zip(pair.x0.as_slice()) {
        let d = vi - (a - b);
        acc += d * d;
    }
    Ok(acc)
}

/// Normalizing target energy.
pub fn denominator(pair: &FlowPair, perm: &Permutation, which: Denominator) -> f64 {
    match which {
        Denominator::Unpermuted => pair.x1.dist_sq(&pair.x0),
        Denominator::Permuted => perm.apply(&pair.x1).dist_sq(&pair.x0),
    }
}

fn drift_at<V: VelocityField + ?Sized>(model: &V, pair: &FlowPair, perm: &Permutation, t: f64) -> Result<Stack> {
    let x = interpolate_stacks(&pair.x0, &perm.apply(&pair.x1), t)?;
    wrap_drift(model, &FlowState { t, x }, &pair.cond)
}

pub fn loss_raw<V: VelocityField + ?Sized>(model: &V, pair: &FlowPair, perm: &Permutation, t: f64) -> Result<f64> {
    raw_from_drift(&drift_at(model, pair, perm, t)?, pair, perm)
}

pub fn loss_normalized<V: VelocityField + ?Sized>(
    model: &V,
    pair: &FlowPair,
    perm: &Permutation,
    t: f64,
    which: Denominator,
) -> Result<f64> {
    let d = denominator(pair, perm, which);
    if !(d > 0.0) {
        return Err(Error::invalid("normalized loss undefined for x1 = x0"));
    }
    Ok(loss_raw(model, pair, perm, t)? / d)
}

/// `10 log10` of the normalized loss, clamped at [`DB_FLOOR`].
pub fn loss_db<V: VelocityField + ?Sized>(
    model: &V,
    pair: &FlowPair,
    perm: &Permutation,
    t: f64,
    which: Denominator,
    counters: &mut LossCounters,
) -> Result<f64> {
    Ok(db_value(loss_normalized(model, pair, perm, t, which)?, counters))
}

fn db_value(normalized: f64, counters: &mut LossCounters) -> f64 {
    if normalized <= DB_FLOOR {
        counters.clamped += 1;
        10.0 * DB_FLOOR.log10()
    } else {
        10.0 * normalized.log10()
    }
}

/// Result of one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct PetOutcome {
    pub perm: Permutation,
    pub t: f64,
    pub loss: f64,
}

fn choose_perm<V: VelocityField + ?Sized>(model: &V, pair: &FlowPair, cfg: &LossConfig) -> Result<Permutation> {
    match cfg.assignment {
        AssignRule::Pit => {
            let k = pair.k();
            if k > cfg.pit_max {
                return Err(Error::Config(format!(
                    "PIT over {k} sources exceeds pit_max = {}; use the euclidean assignment",
                    cfg.pit_max
                )));
            }
            let v0 = wrap_drift(model, &FlowState { t: 0.0, x: pair.x0.clone() }, &pair.cond)?;
            Ok(pit_from_drift(&v0, pair))
        }
        AssignRule::Euclidean => euclidean_assign(&pair.x0, &pair.x1),
        // pairs arrive already coupled
        AssignRule::Ot => Ok(Permutation::identity(pair.k())),
    }
}

/// One example's loss without gradients. Returns `None` when the sample is
/// degenerate and skipped.
pub fn pet_step<V: VelocityField + ?Sized, R: Rng + ?Sized>(
    model: &V,
    pair: &FlowPair,
    cfg: &LossConfig,
    rng: &mut R,
    counters: &mut LossCounters,
) -> Result<Option<PetOutcome>> {
    let perm = choose_perm(model, pair, cfg)?;
    let t = sample_time(&cfg.weighting, rng);
    let raw = loss_raw(model, pair, &perm, t)?;
    let Some(loss) = finish(cfg, raw, pair, &perm, counters) else { return Ok(None) };
    Ok(Some(PetOutcome { perm, t, loss }))
}

fn finish(cfg: &LossConfig, raw: f64, pair: &FlowPair, perm: &Permutation, counters: &mut LossCounters) -> Option<f64> {
    if cfg.kind == LossKind::Raw {
        return Some(raw);
    }
    let d = denominator(pair, perm, cfg.denominator);
    if !(d > 0.0) {
        counters.skipped += 1;
        return None;
    }
    match cfg.kind {
        LossKind::Normalized => Some(raw / d),
        _ => Some(db_value(raw / d, counters)),
    }
}

/// Builds the configured loss at `(perm, t)` on the tape. Returns `None` for
/// a skipped sample.
pub fn loss_tape(
    model: &VelocityModel,
    tape: &mut Tape,
    bound: &Bound,
    pair: &FlowPair,
    perm: &Permutation,
    t: f64,
    cfg: &LossConfig,
    counters: &mut LossCounters,
) -> Result<Option<Var>> {
    let x1 = perm.apply(&pair.x1);
    let xt = interpolate_stacks(&pair.x0, &x1, t)?;
    let xin = project_perp(&xt);
    let v = model.forward_tape(tape, bound, t, &xin, pair.cond.mean())?;
    let target = x1.sub(&pair.x0)?;
    let target = tape.constant(Tensor::new(vec![target.k(), target.l()], target.into_vec())?);
    let diff = tape.sub(v, target)?;
    let raw = tape.sum_sq(diff);
    if cfg.kind == LossKind::Raw {
        return Ok(Some(raw));
    }
    let d = denominator(pair, perm, cfg.denominator);
    if !(d > 0.0) {
        counters.skipped += 1;
        return Ok(None);
    }
    let norm = tape.scale(raw, 1.0 / d);
    if cfg.kind == LossKind::Normalized {
        return Ok(Some(norm));
    }
    if tape.value(norm).data()[0] <= DB_FLOOR {
        counters.clamped += 1;
        return Ok(Some(tape.constant(Tensor::scalar(10.0 * DB_FLOOR.log10()))));
    }
    let ln = tape.log(norm);
    Ok(Some(tape.scale(ln, 10.0 / std::f64::consts::LN_10)))
}

/// Training version of [`pet_step`]: the assignment uses the training
/// weights without gradients, then the loss graph is built on `tape`.
pub fn pet_step_tape<R: Rng + ?Sized>(
    model: &VelocityModel,
    tape: &mut Tape,
    bound: &Bound,
    pair: &FlowPair,
    cfg: &LossConfig,
    rng: &mut R,
    counters: &mut LossCounters,
) -> Result<Option<(Var, PetOutcome)>> {
    let train_view = |t: f64, x: &Stack, c: &[f64]| model.forward_with(model.params(), t, x, c);
    let perm = choose_perm(&train_view, pair, cfg)?;
    let t = sample_time(&cfg.weighting, rng);
    let Some(loss) = loss_tape(model, tape, bound, pair, &perm, t, cfg, counters)? else { return Ok(None) };
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss at t = {t}")));
    }
    Ok(Some((loss, PetOutcome { perm, t, loss: value })))
}

/// Finite-difference check of the loss gradient with respect to every model
/// parameter (at most `max_coords` coordinates per tensor).
pub fn loss_grad_check(
    model: &VelocityModel,
    pair: &FlowPair,
    perm: &Permutation,
    t: f64,
    cfg: &LossConfig,
    max_coords: usize,
) -> Result<GradCheckReport> {
    grad_check(
        model.params().tensors(),
        |tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let mut counters = LossCounters::default();
            loss_tape(model, tape, &bound, pair, perm, t, cfg, &mut counters)?
                .ok_or_else(|| Error::invalid("degenerate pair"))
        },
        1e-5,
        1e-6,
        max_coords,
    )
}
