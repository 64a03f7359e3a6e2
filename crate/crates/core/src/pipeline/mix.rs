//! Cropping, level normalization and pairwise SNR mixing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowpath::FlowPair;
use crate::geometry::Stack;
use crate::noiseshape::{active_power, envelope, EnvelopeParams, NoiseConfig};

/// How sources are cut and leveled before summing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub sample_rate: u32,
    pub crop_seconds: f64,
    /// Active level of the loudest source, dB re 1.0.
    pub level_range: [f64; 2],
    /// Level of the first source relative to each other source, dB.
    pub snr_range: [f64; 2],
    /// New crop offsets tried for a silent crop before giving up.
    pub max_retries: usize,
}

impl Default for MixSpec {
    fn default() -> Self {
        Self { sample_rate: 16000, crop_seconds: 0.5, level_range: [-29.0, -19.0], snr_range: [-10.0, 10.0], max_retries: 10 }
    }
}

impl MixSpec {
    pub fn crop_len(&self) -> usize {
        (self.crop_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self, source_len: usize) -> Result<()> {
        let [a, b] = self.level_range;
        let [c, d] = self.snr_range;
        if !(a <= b) || !(c <= d) {
            return Err(Error::Config(format!("ranges must be ordered: level {:?}, snr {:?}", self.level_range, self.snr_range)));
        }
        let n = self.crop_len();
        if n == 0 || n > source_len {
            return Err(Error::Config(format!("crop of {n} samples does not fit sources of {source_len}")));
        }
        Ok(())
    }
}

/// Level draws of one mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct MixDraw {
    pub level_db: f64,
    /// One entry per source after the first.
    pub snr_db: Vec<f64>,
}

impl MixDraw {
    pub fn sample<R: Rng + ?Sized>(spec: &MixSpec, k: usize, rng: &mut R) -> Self {
        let [a, b] = spec.level_range;
        let [c, d] = spec.snr_range;
        let level_db = rng.random_range(a..=b);
        let snr_db = (1..k).map(|_| rng.random_range(c..=d)).collect();
        Self { level_db, snr_db }
    }

    /// Target active level of every source.
    pub fn targets(&self) -> Vec<f64> {
        let rel: Vec<f64> = std::iter::once(0.0).chain(self.snr_db.iter().map(|r| -r)).collect();
        let top = rel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        rel.iter().map(|g| g - top + self.level_db).collect()
    }
}

/// Active level in dB re 1.0, `None` for a silent signal.
pub fn active_level_db(x: &[f64], params: &EnvelopeParams) -> Result<Option<f64>> {
    let p = active_power(&envelope(x, params)?);
    Ok((p > 0.0).then(|| 20.0 * p.log10()))
}

/// Rescales each crop to its target level and stacks them.
pub fn level_sources<S: AsRef<[f64]>>(crops: &[S], draw: &MixDraw, params: &EnvelopeParams) -> Result<Stack> {
    let targets = draw.targets();
    if targets.len() != crops.len() {
        return Err(Error::shape(format!("{} crops for {} level targets", crops.len(), targets.len())));
    }
    let mut rows = Vec::with_capacity(crops.len());
    for (i, (c, t)) in crops.iter().zip(&targets).enumerate() {
        let c = c.as_ref();
        let level = active_level_db(c, params)?.ok_or_else(|| Error::invalid(format!("source {i} is silent")))?;
        let g = 10f64.powf((t - level) / 20.0);
        rows.push(c.iter().map(|v| v * g).collect::<Vec<_>>());
    }
    Stack::from_rows(&rows)
}

/// Crops, levels and mixes `sources`, then draws the start point.
pub fn make_example<S: AsRef<[f64]>>(spec: &MixSpec, noise: &NoiseConfig, sources: &[S], seed: u64) -> Result<FlowPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.crop_len();
    let params = noise.envelope_params(spec.sample_rate);
    let mut crops = Vec::with_capacity(sources.len());
    for (i, s) in sources.iter().enumerate() {
        let s = s.as_ref();
        spec.validate(s.len())?;
        let mut found = None;
        for _ in 0..=spec.max_retries {
            let off = rng.random_range(0..=s.len() - n);
            let crop = &s[off..off + n];
            if active_level_db(crop, &params)?.is_some() {
                found = Some(crop);
                break;
            }
        }
        let crop = found.ok_or_else(|| {
            Error::invalid(format!("source {i} stayed silent over {} crops", spec.max_retries + 1))
        })?;
        crops.push(crop);
    }
    let draw = MixDraw::sample(spec, sources.len(), &mut rng);
    let x1 = level_sources(&crops, &draw, &params)?;
    let shaper = noise.shaper(&x1.column_mean(), spec.sample_rate)?;
    FlowPair::sample(x1, &shaper, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::mix;
    use crate::pipeline::synth::{synth_sources, SourceKind};

    fn signals(seed: u64) -> Vec<Vec<f64>> {
        synth_sources(&SourceKind::ALL, 2, 16000, 16000, seed).unwrap().into_iter().map(|s| s.signal).collect()
    }

    #[test]
    fn zero_snr_gives_equal_levels() {
        let params = NoiseConfig::default().envelope_params(16000);
        let s = signals(1);
        let x = level_sources(&[&s[0][..8000], &s[1][..8000]], &MixDraw { level_db: -25.0, snr_db: vec![0.0] }, &params).unwrap();
        let a = active_level_db(x.row(0), &params).unwrap().unwrap();
        let b = active_level_db(x.row(1), &params).unwrap().unwrap();
        assert!((a - b).abs() <= 0.1 && (a + 25.0).abs() <= 0.1);
    }

    #[test]
    fn louder_source_sits_at_level_draw() {
        let params = NoiseConfig::default().envelope_params(16000);
        let s = signals(2);
        for snr in [-7.0, 4.0] {
            let draw = MixDraw { level_db: -19.0, snr_db: vec![snr] };
            let x = level_sources(&[&s[0][..8000], &s[1][..8000]], &draw, &params).unwrap();
            let a = active_level_db(x.row(0), &params).unwrap().unwrap();
            let b = active_level_db(x.row(1), &params).unwrap().unwrap();
            assert!((a.max(b) + 19.0).abs() <= 0.1);
            assert!((a - b - snr).abs() <= 0.1);
        }
    }

    #[test]
    fn example_is_consistent_and_deterministic() {
        let spec = MixSpec::default();
        let noise = NoiseConfig::default();
        let s = signals(3);
        let p = make_example(&spec, &noise, &s, 9).unwrap();
        assert_eq!(p, make_example(&spec, &noise, &s, 9).unwrap());
        assert_eq!((p.k(), p.x1.l()), (2, 8000));
        let y = mix(&p.x1).unwrap();
        for (a, b) in y.iter().zip(p.cond.mean()) {
            assert!((a - 2.0 * b).abs() <= 1e-15 * a.abs().max(1.0));
        }
        for (t, x) in MixDraw::sample(&spec, 3, &mut ChaCha8Rng::seed_from_u64(0)).targets().iter().zip([0, 1, 2]) {
            assert!(*t <= -19.0 && *t >= -29.0 - 20.0, "{x}: {t}");
        }
    }

    #[test]
    fn silent_source_is_rejected_after_retries() {
        let spec = MixSpec::default();
        let s = vec![signals(4)[0].clone(), vec![0.0; 16000]];
        let err = make_example(&spec, &NoiseConfig::default(), &s, 0).unwrap_err();
        assert!(err.to_string().contains("source 1"), "{err}");
    }

    #[test]
    fn partly_silent_source_is_recropped() {
        let spec = MixSpec::default();
        let mut quiet = signals(5)[1].clone();
        quiet[..12000].iter_mut().for_each(|v| *v = 0.0);
        let s = vec![signals(5)[0].clone(), quiet];
        let ok = (0..20).filter(|&seed| make_example(&spec, &NoiseConfig::default(), &s, seed).is_ok()).count();
        assert_eq!(ok, 20);
    }
}
