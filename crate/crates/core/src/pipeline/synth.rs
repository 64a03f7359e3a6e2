//! Synthetic band-limited sources.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    SineChirp,
    FilteredNoise,
    AmTones,
}

impl SourceKind {
    pub const ALL: [SourceKind; 3] = [SourceKind::SineChirp, SourceKind::FilteredNoise, SourceKind::AmTones];

    pub fn as_str(&self) -> &'static str {
        match self {
            SourceKind::SineChirp => "sine_chirp",
            SourceKind::FilteredNoise => "filtered_noise",
            SourceKind::AmTones => "am_tones",
        }
    }
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine_chirp" | "sine-chirp" => Ok(SourceKind::SineChirp),
            "filtered_noise" | "filtered-noise" => Ok(SourceKind::FilteredNoise),
            "am_tones" | "am-tones" => Ok(SourceKind::AmTones),
            _ => Err(Error::Config(format!("unknown source kind '{s}' (sine_chirp|filtered_noise|am_tones)"))),
        }
    }
}

/// Frequency range in Hz.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

/// One generated source with the band it was drawn in.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSource {
    pub kind: SourceKind,
    pub band: Band,
    pub signal: Vec<f64>,
}

const F_MIN: f64 = 100.0;
/// Neighboring slots share this ratio of bandwidth at each edge.
const OVERLAP: f64 = 1.3;

/// Bands of the `k` source slots: log-spaced between 100 Hz and 0.44 fs,
/// each widened so neighbors overlap.
pub fn slot_bands(k: usize, sample_rate: u32) -> Vec<Band> {
    let f_max = 0.44 * sample_rate as f64;
    let w = (f_max / F_MIN).ln() / k as f64;
    (0..k)
        .map(|i| {
            let lo = F_MIN * (w * i as f64).exp();
            let hi = F_MIN * (w * (i + 1) as f64).exp();
            Band { lo: (lo / OVERLAP).max(F_MIN), hi: (hi * OVERLAP).min(f_max) }
        })
        .collect()
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// Raised-cosine on/off gating with `fade` samples per transition.
fn gate<R: Rng + ?Sized>(rng: &mut R, len: usize, sample_rate: u32) -> Vec<f64> {
    let fade = (0.02 * sample_rate as f64) as usize;
    let mut g = vec![0.0; len];
    let mut pos = 0usize;
    let mut on = rng.random_bool(0.7);
    while pos < len {
        let seg = (rng.random_range(0.1..0.4) * sample_rate as f64) as usize;
        let end = (pos + seg).min(len);
        if on {
            for (i, v) in g[pos..end].iter_mut().enumerate() {
                let a = i.min(end - pos - 1 - i) as f64;
                *v = if a >= fade as f64 { 1.0 } else { 0.5 - 0.5 * (PI * a / fade as f64).cos() };
            }
        }
        pos = end;
        on = !on || rng.random_bool(0.2);
    }
    g
}

fn sine_chirp<R: Rng + ?Sized>(rng: &mut R, band: Band, len: usize, sample_rate: u32) -> Vec<f64> {
    let (lo, hi) = (band.lo * 1.2, band.hi / 1.2);
    let fs = sample_rate as f64;
    let dur = len as f64 / fs;
    let mut out = vec![0.0; len];
    for _ in 0..rng.random_range(1..=3) {
        let (f0, f1) = (log_uniform(rng, lo, hi), log_uniform(rng, lo, hi));
        let amp = rng.random_range(0.3..1.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        let rate = (f1 - f0) / dur;
        for (n, v) in out.iter_mut().enumerate() {
            let t = n as f64 / fs;
            *v += amp * (phase + 2.0 * PI * (f0 * t + 0.5 * rate * t * t)).sin();
        }
    }
    let g = gate(rng, len, sample_rate);
    out.iter_mut().zip(&g).for_each(|(v, g)| *v *= g);
    out
}

fn filtered_noise<R: Rng + ?Sized>(rng: &mut R, band: Band, len: usize, sample_rate: u32) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..len).map(|_| Complex::new(rng.sample(StandardNormal), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    let fs = sample_rate as f64;
    let taper = 0.1 * (band.hi - band.lo);
    for (i, c) in buf.iter_mut().enumerate() {
        let f = i.min(len - i) as f64 * fs / len as f64;
        let inside = (f - band.lo).min(band.hi - f);
        *c *= if inside <= 0.0 {
            0.0
        } else if inside < taper {
            0.5 - 0.5 * (PI * inside / taper).cos()
        } else {
            1.0
        };
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let rate = rng.random_range(1.0..4.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    buf.iter()
        .enumerate()
        .map(|(n, c)| {
            let am = 0.6 + 0.4 * (phase + 2.0 * PI * rate * n as f64 / fs).sin();
            am * c.re / len as f64
        })
        .collect()
}

fn am_tones<R: Rng + ?Sized>(rng: &mut R, band: Band, len: usize, sample_rate: u32, amplitude: f64) -> Vec<f64> {
    let fs = sample_rate as f64;
    let f0 = log_uniform(rng, band.lo * 1.2, (band.hi / 2.4).max(band.lo * 1.3));
    let rate = rng.random_range(2.0..8.0);
    let depth = rng.random_range(0.5..1.0);
    let mod_phase = rng.random_range(0.0..2.0 * PI);
    let partials: Vec<(f64, f64, f64)> = (1..=6)
        .map(|h| h as f64 * f0)
        .take_while(|&f| f < band.hi / 1.1)
        .enumerate()
        .map(|(i, f)| (f, 1.0 / (i + 1) as f64, rng.random_range(0.0..2.0 * PI)))
        .collect();
    (0..len)
        .map(|n| {
            let t = n as f64 / fs;
            let env = 1.0 - depth * (0.5 + 0.5 * (mod_phase + 2.0 * PI * rate * t).cos());
            let tone: f64 = partials.iter().map(|&(f, a, p)| a * (p + 2.0 * PI * f * t).sin()).sum();
            amplitude * env * tone
        })
        .collect()
}

/// One source of `kind` inside `band`. An `amplitude` of zero yields silence.
pub fn synth_signal<R: Rng + ?Sized>(
    kind: SourceKind,
    band: Band,
    len: usize,
    sample_rate: u32,
    amplitude: f64,
    rng: &mut R,
) -> Vec<f64> {
    let mut s = match kind {
        SourceKind::SineChirp => sine_chirp(rng, band, len, sample_rate),
        SourceKind::FilteredNoise => filtered_noise(rng, band, len, sample_rate),
        SourceKind::AmTones => return am_tones(rng, band, len, sample_rate, amplitude),
    };
    s.iter_mut().for_each(|v| *v *= amplitude);
    s
}

/// `k` sources, one per slot band, in a seeded random slot order.
/// Each source's kind is drawn from `kinds`.
pub fn synth_sources(kinds: &[SourceKind], k: usize, len: usize, sample_rate: u32, seed: u64) -> Result<Vec<SynthSource>> {
    if kinds.is_empty() {
        return Err(Error::Config("no source kinds configured".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bands = slot_bands(k, sample_rate);
    let mut order: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Ok(order
        .into_iter()
        .map(|slot| {
            let kind = kinds[rng.random_range(0..kinds.len())];
            let band = bands[slot];
            SynthSource { kind, band, signal: synth_signal(kind, band, len, sample_rate, 1.0, &mut rng) }
        })
        .collect())
}
