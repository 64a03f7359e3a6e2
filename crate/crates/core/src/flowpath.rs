//! Conditional flow path on the mixture-consistent slice.
//!
//! Starting points are `x0 = S_bar + P_perp Z`, endpoints are the sources
//! `x1 = S`, and the state at time `t` is the straight line between them. Every
//! state therefore keeps `P x_t = S_bar`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{project_perp, project_perp_in_place, MeanStack, Stack};
use crate::noiseshape::NoiseShaper;

/// A raw velocity network `v~(t, P_perp x_t, s_bar)`.
///
/// Implementors see the centered state and the mixture mean and may return any
/// `K x L` stack; [`wrap_drift`] projects the result back onto the slice.
pub trait VelocityField {
    fn velocity(&self, t: f64, xin: &Stack, cond: &[f64]) -> Result<Stack>;
}

impl<F> VelocityField for F
where
    F: Fn(f64, &Stack, &[f64]) -> Result<Stack>,
{
    fn velocity(&self, t: f64, xin: &Stack, cond: &[f64]) -> Result<Stack> {
        self(t, xin, cond)
    }
}

/// A point on the flow path.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub x: Stack,
}

/// One training example: noisy start, source endpoint, conditioning and the
/// realized noise draw (kept so every evaluation of the pair uses the same `Z`).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPair {
    pub x0: Stack,
    pub x1: Stack,
    pub cond: MeanStack,
    pub noise: Stack,
}

impl FlowPair {
    /// Builds a pair from sources and an already shaped noise draw `Z`.
    pub fn from_noise(x1: Stack, noise: Stack) -> Result<Self> {
        x1.check_same_shape(&noise)?;
        let cond = MeanStack::from_mean(x1.column_mean(), x1.k());
        let x0 = x0_from_noise(&cond, &noise)?;
        Ok(Self { x0, x1, cond, noise })
    }

    /// Draws a fresh start point for sources `x1`.
    pub fn sample<R: Rng + ?Sized>(x1: Stack, shaper: &NoiseShaper, rng: &mut R) -> Result<Self> {
        let cond = MeanStack::from_mean(x1.column_mean(), x1.k());
        let noise = draw_noise(&cond, shaper, rng)?;
        Self::from_noise(x1, noise)
    }

    pub fn k(&self) -> usize {
        self.x1.k()
    }

    /// The same pair with source rows relabeled: `x1 -> perm x1`.
    pub fn permute_sources(&self, perm: &[usize]) -> FlowPair {
        FlowPair {
            x0: self.x0.clone(),
            x1: self.x1.permute_rows(perm),
            cond: self.cond.clone(),
            noise: self.noise.clone(),
        }
    }

    /// Relabels both endpoints and the noise by the same permutation.
    pub fn permute_all(&self, perm: &[usize]) -> FlowPair {
        FlowPair {
            x0: self.x0.permute_rows(perm),
            x1: self.x1.permute_rows(perm),
            cond: self.cond.clone(),
            noise: self.noise.permute_rows(perm),
        }
    }
}

/// Shaped Gaussian noise `Z = Z~ T(s_bar)` with `Z~` i.i.d. standard normal.
pub fn draw_noise<R: Rng + ?Sized>(
    cond: &MeanStack,
    shaper: &NoiseShaper,
    rng: &mut R,
) -> Result<Stack> {
    if let Some(len) = shaper.len() {
        if len != cond.l() {
            return Err(Error::shape(format!(
                "noise shaper built for length {len}, conditioning has length {}",
                cond.l()
            )));
        }
    }
    let white: Vec<f64> = (0..cond.k() * cond.l()).map(|_| rng.sample(StandardNormal)).collect();
    shaper.apply(&Stack::new(cond.k(), cond.l(), white)?)
}

/// `S_bar + P_perp Z`.
pub fn x0_from_noise(cond: &MeanStack, noise: &Stack) -> Result<Stack> {
    if noise.k() != cond.k() || noise.l() != cond.l() {
        return Err(Error::shape(format!(
            "noise {}x{} vs conditioning {}x{}",
            noise.k(),
            noise.l(),
            cond.k(),
            cond.l()
        )));
    }
    let mut x0 = project_perp(noise);
    let l = x0.l();
    for row in x0.as_mut_slice().chunks_exact_mut(l) {
        for (v, m) in row.iter_mut().zip(cond.mean()) {
            *v += m;
        }
    }
    Ok(x0)
}

/// Samples a start point on the slice of `cond`.
pub fn make_x0<R: Rng + ?Sized>(
    cond: &MeanStack,
    shaper: &NoiseShaper,
    rng: &mut R,
) -> Result<Stack> {
    let noise = draw_noise(cond, shaper, rng)?;
    x0_from_noise(cond, &noise)
}

/// `x_t = t x1 + (1 - t) x0`.
pub fn interpolate(pair: &FlowPair, t: f64) -> Result<FlowState> {
    interpolate_stacks(&pair.x0, &pair.x1, t).map(|x| FlowState { t, x })
}

pub(crate) fn interpolate_stacks(x0: &Stack, x1: &Stack, t: f64) -> Result<Stack> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    if t == 0.0 {
        return Ok(x0.clone());
    }
    if t == 1.0 {
        return Ok(x1.clone());
    }
    x0.zip_map(x1, |a, b| t * b + (1.0 - t) * a)
}

/// Regression target `x1 - x0`.
pub fn target(pair: &FlowPair) -> Stack {
    pair.x1.sub(&pair.x0).expect("pair endpoints share a shape")
}

/// The parameterized drift `P_perp v~(t, P_perp x_t, s_bar)`.
pub fn wrap_drift<V: VelocityField + ?Sized>(
    raw: &V,
    state: &FlowState,
    cond: &MeanStack,
) -> Result<Stack> {
    let xin = project_perp(&state.x);
    let mut v = raw.velocity(state.t, &xin, cond.mean())?;
    v.check_same_shape(&state.x)?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("drift at t = {}", state.t)));
    }
    project_perp_in_place(&mut v);
    Ok(v)
}
