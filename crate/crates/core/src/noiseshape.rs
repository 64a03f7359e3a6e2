//! Mixture-driven shaping of the initial noise.
//!
//! The white draw `Z~` is scaled by an operator `T(s_bar)` built from the
//! mixture mean: a constant gain, the mixture's active level, or the square
//! root of its energy envelope (per sample).

use std::str::FromStr;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Stack;

/// Short-time energy of a signal, `values[n] >= 0`, same length as the input.
#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub values: Vec<f64>,
    pub window_len: usize,
    /// Minimum energy for a sample to count as active.
    pub threshold: f64,
}

/// Envelope window and activity threshold settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvelopeParams {
    pub window_len: usize,
    /// Activity threshold in dB below the envelope peak.
    pub threshold_db: f64,
    /// Absolute lower bound on the activity threshold.
    pub threshold_floor: f64,
}

impl Default for EnvelopeParams {
    fn default() -> Self {
        Self { window_len: 1023, threshold_db: 40.0, threshold_floor: 1e-8 }
    }
}

impl EnvelopeParams {
    /// Window length from a duration, rounded to the nearest odd sample count.
    pub fn with_window_ms(mut self, ms: f64, sample_rate: u32) -> Self {
        let n = (ms * 1e-3 * sample_rate as f64).round() as usize;
        self.window_len = if n % 2 == 1 { n } else { n.saturating_sub(1) }.max(3);
        self
    }
}

/// Symmetric Hamming window scaled to unit sum.
pub fn unit_sum_hamming(len: usize) -> Vec<f64> {
    let denom = (len - 1) as f64;
    let mut w: Vec<f64> = (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / denom).cos())
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Energy envelope: squared samples filtered by a unit-sum Hamming window,
/// centered, zero padded at the edges.
pub fn envelope(mix: &[f64], params: &EnvelopeParams) -> Result<Envelope> {
    let w = params.window_len;
    if w < 3 || w % 2 == 0 {
        return Err(Error::invalid(format!("envelope window must be odd and >= 3, got {w}")));
    }
    if w > mix.len() {
        return Err(Error::invalid(format!(
            "envelope window {w} longer than signal {}",
            mix.len()
        )));
    }
    let taps = unit_sum_hamming(w);
    let power: Vec<f64> = mix.iter().map(|v| v * v).collect();
    let mut values = fft_convolve_same(&power, &taps);

    // Samples whose window only covers silence are exactly zero.
    let half = w / 2;
    let mut active_prefix = Vec::with_capacity(power.len() + 1);
    active_prefix.push(0usize);
    for p in &power {
        active_prefix.push(active_prefix.last().unwrap() + usize::from(*p != 0.0));
    }
    for (n, v) in values.iter_mut().enumerate() {
        let lo = n.saturating_sub(half);
        let hi = (n + half + 1).min(power.len());
        if active_prefix[hi] == active_prefix[lo] || *v < 0.0 {
            *v = 0.0;
        }
    }

    let peak = values.iter().cloned().fold(0.0, f64::max);
    let threshold = (peak * 10f64.powf(-params.threshold_db / 10.0)).max(params.threshold_floor);
    Ok(Envelope { values, window_len: w, threshold })
}

fn fft_convolve_same(x: &[f64], taps: &[f64]) -> Vec<f64> {
    let n = (x.len() + taps.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    a.resize(n, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = taps.iter().map(|&v| Complex::new(v, 0.0)).collect();
    b.resize(n, Complex::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    let half = taps.len() / 2;
    let scale = 1.0 / n as f64;
    a[half..half + x.len()].iter().map(|c| c.re * scale).collect()
}

/// Root of the mean envelope over samples above the activity threshold.
pub fn active_power(env: &Envelope) -> f64 {
    let (sum, count) = env
        .values
        .iter()
        .filter(|&&v| v > env.threshold)
        .fold((0.0, 0usize), |(s, c), &v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}

/// Which noise shaper to build for a mixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Constant,
    ActivePower,
    Envelope,
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(NoiseKind::Constant),
            "active_power" => Ok(NoiseKind::ActivePower),
            "envelope" => Ok(NoiseKind::Envelope),
            other => Err(Error::Config(format!(
                "unknown noise kind '{other}' (constant|active_power|envelope)"
            ))),
        }
    }
}

impl NoiseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseKind::Constant => "constant",
            NoiseKind::ActivePower => "active_power",
            NoiseKind::Envelope => "envelope",
        }
    }
}

/// Noise settings of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    /// Gain of the constant shaper.
    pub sigma0: f64,
    /// Envelope window; rounded to an odd sample count.
    pub window_ms: f64,
    pub threshold_db: f64,
    pub threshold_floor: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { kind: NoiseKind::Envelope, sigma0: 1.0, window_ms: 64.0, threshold_db: 40.0, threshold_floor: 1e-8 }
    }
}

impl NoiseConfig {
    pub fn envelope_params(&self, sample_rate: u32) -> EnvelopeParams {
        EnvelopeParams { threshold_db: self.threshold_db, threshold_floor: self.threshold_floor, ..Default::default() }
            .with_window_ms(self.window_ms, sample_rate)
    }

    pub fn shaper(&self, s_bar: &[f64], sample_rate: u32) -> Result<NoiseShaper> {
        NoiseShaper::for_mixture(self.kind, s_bar, self.sigma0, &self.envelope_params(sample_rate))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0) || !(self.window_ms > 0.0) || !(self.threshold_db >= 0.0) || !(self.threshold_floor >= 0.0) {
            return Err(Error::Config(format!("invalid noise settings {self:?}")));
        }
        Ok(())
    }
}

/// The operator `T(s_bar)` applied to white noise.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseShaper {
    Constant { sigma0: f64 },
    ActivePower { sigma_act: f64 },
    Envelope(Envelope),
}

impl NoiseShaper {
    /// Builds the shaper of the given kind for the mixture mean `s_bar`.
    pub fn for_mixture(
        kind: NoiseKind,
        s_bar: &[f64],
        sigma0: f64,
        params: &EnvelopeParams,
    ) -> Result<Self> {
        match kind {
            NoiseKind::Constant => {
                if !(sigma0 > 0.0) {
                    return Err(Error::Config(format!("sigma0 must be positive, got {sigma0}")));
                }
                Ok(NoiseShaper::Constant { sigma0 })
            }
            NoiseKind::ActivePower => {
                let env = envelope(s_bar, params)?;
                Ok(NoiseShaper::ActivePower { sigma_act: active_power(&env) })
            }
            NoiseKind::Envelope => Ok(NoiseShaper::Envelope(envelope(s_bar, params)?)),
        }
    }

    /// Signal length the shaper is bound to, if any.
    pub fn len(&self) -> Option<usize> {
        match self {
            NoiseShaper::Envelope(e) => Some(e.values.len()),
            _ => None,
        }
    }

    /// Shapes a white `K x L` draw into `Z`.
    pub fn apply(&self, z_white: &Stack) -> Result<Stack> {
        match self {
            NoiseShaper::Constant { sigma0 } => Ok(z_white.scale(*sigma0)),
            NoiseShaper::ActivePower { sigma_act } => Ok(z_white.scale(*sigma_act)),
            NoiseShaper::Envelope(env) => {
                if env.values.len() != z_white.l() {
                    return Err(Error::shape(format!(
                        "envelope length {} vs noise length {}",
                        env.values.len(),
                        z_white.l()
                    )));
                }
                let gains: Vec<f64> = env.values.iter().map(|v| v.sqrt()).collect();
                let mut out = z_white.clone();
                let l = out.l();
                for row in out.as_mut_slice().chunks_exact_mut(l) {
                    for (v, g) in row.iter_mut().zip(&gains) {
                        *v *= g;
                    }
                }
                Ok(out)
            }
        }
    }
}
