//! Euler integration of the mixture-consistent flow.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flowpath::{make_x0, wrap_drift, FlowState, VelocityField};
use crate::geometry::{MeanStack, Stack};
use crate::noiseshape::NoiseShaper;

/// Step sizes of the five-step schedule, largest first.
pub const CUSTOM5_STEPS: [f64; 5] = [0.95, 4e-2, 9e-3, 9e-4, 1e-4];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear(usize),
    Custom5,
    /// [`CUSTOM5_STEPS`] applied smallest first.
    Custom5Reversed,
    Single,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "custom5" => Ok(ScheduleKind::Custom5),
            "custom5_rev" => Ok(ScheduleKind::Custom5Reversed),
            "single" => Ok(ScheduleKind::Single),
            _ => {
                let n = s
                    .strip_prefix("linear:")
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown schedule '{s}' (linear:N|custom5|custom5_rev|single)")))?;
                if n == 0 {
                    return Err(Error::Config("linear schedule needs at least one step".into()));
                }
                Ok(ScheduleKind::Linear(n))
            }
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Linear(n) => write!(f, "linear:{n}"),
            ScheduleKind::Custom5 => write!(f, "custom5"),
            ScheduleKind::Custom5Reversed => write!(f, "custom5_rev"),
            ScheduleKind::Single => write!(f, "single"),
        }
    }
}

/// Strictly increasing time grid from 0 to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub times: Vec<f64>,
}

impl Schedule {
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.windows(2).map(|w| (w[0], w[1] - w[0]))
    }
}

pub fn make_schedule(kind: ScheduleKind) -> Result<Schedule> {
    let cumulative = |steps: &[f64]| {
        let mut times = vec![0.0];
        let mut acc = 0.0;
        for s in steps {
            acc += s;
            times.push(acc);
        }
        *times.last_mut().unwrap() = 1.0;
        times
    };
    let times = match kind {
        ScheduleKind::Linear(0) => return Err(Error::Config("linear schedule needs at least one step".into())),
        ScheduleKind::Linear(n) => (0..=n).map(|i| i as f64 / n as f64).collect(),
        ScheduleKind::Custom5 => cumulative(&CUSTOM5_STEPS),
        ScheduleKind::Custom5Reversed => {
            let mut s = CUSTOM5_STEPS;
            s.reverse();
            cumulative(&s)
        }
        ScheduleKind::Single => vec![0.0, 1.0],
    };
    Ok(Schedule { kind, times })
}

/// Integrates from `x0` along `schedule`.
pub fn integrate<V: VelocityField + ?Sized>(model: &V, x0: Stack, cond: &MeanStack, schedule: &Schedule) -> Result<Stack> {
    let mut x = x0;
    for (i, (t, dt)) in schedule.steps().enumerate() {
        let state = FlowState { t, x };
        let v = wrap_drift(model, &state, cond).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("step {i}: {m}")),
            other => other,
        })?;
        x = state.x;
        x.axpy(dt, &v)?;
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("state after step {i} (t = {})", t + dt)));
        }
    }
    Ok(x)
}

/// Separates `mixture` into `shaper`-noised sources: starts from
/// `x0 = S_bar + P_perp Z` and follows the drift to `t = 1`.
pub fn separate<V: VelocityField + ?Sized>(
    model: &V,
    mixture: &[f64],
    k: usize,
    shaper: &NoiseShaper,
    schedule: &Schedule,
    seed: u64,
) -> Result<Stack> {
    let cond = MeanStack::from_mixture(mixture, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = make_x0(&cond, shaper, &mut rng)?;
    integrate(model, x0, &cond, schedule)
}
