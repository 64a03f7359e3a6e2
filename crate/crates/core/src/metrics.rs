//! SI-SDR and permutation-resolved scoring.

use crate::assignment::{optimal_matching, Permutation};
use crate::error::{Error, Result};
use crate::geometry::Stack;

/// SI-SDR values are clamped to `[-CLAMP_DB, CLAMP_DB]`.
pub const CLAMP_DB: f64 = 100.0;

/// Scale-invariant signal-to-distortion ratio of `est` against `reference`, in dB.
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::shape(format!("estimate has {} samples, reference {}", est.len(), reference.len())));
    }
    let rr: f64 = reference.iter().map(|v| v * v).sum();
    if !(rr > 0.0) {
        return Err(Error::invalid("SI-SDR reference is silent"));
    }
    let alpha = est.iter().zip(reference).map(|(a, b)| a * b).sum::<f64>() / rr;
    let mut sig = 0.0;
    let mut err = 0.0;
    for (e, r) in est.iter().zip(reference) {
        let s = alpha * r;
        sig += s * s;
        err += (e - s) * (e - s);
    }
    let db = if err == 0.0 {
        CLAMP_DB
    } else if sig == 0.0 {
        -CLAMP_DB
    } else {
        10.0 * (sig / err).log10()
    };
    Ok(db.clamp(-CLAMP_DB, CLAMP_DB))
}

/// Best assignment of estimates to references.
#[derive(Clone, Debug, PartialEq)]
pub struct PermScore {
    /// `perm[k]` is the estimate matched to reference `k`.
    pub perm: Permutation,
    pub per_source: Vec<f64>,
    pub mean: f64,
}

/// Maximizes mean SI-SDR over assignments: exhaustive for `K <= 4`,
/// Hungarian otherwise.
pub fn best_perm_score(est: &Stack, reference: &Stack) -> Result<PermScore> {
    est.check_same_shape(reference)?;
    let k = est.k();
    let mut m = vec![0.0; k * k];
    for r in 0..k {
        for e in 0..k {
            m[r * k + e] = si_sdr(est.row(e), reference.row(r))?;
        }
    }
    let perm = if k <= 4 {
        let mut best = (f64::NEG_INFINITY, Permutation::identity(k));
        for p in Permutation::all(k) {
            let s: f64 = p.as_slice().iter().enumerate().map(|(r, &e)| m[r * k + e]).sum();
            if s > best.0 {
                best = (s, p);
            }
        }
        best.1
    } else {
        let cost: Vec<f64> = m.iter().map(|v| -v).collect();
        Permutation::new(optimal_matching(&cost, k))?
    };
    let per_source: Vec<f64> = perm.as_slice().iter().enumerate().map(|(r, &e)| m[r * k + e]).collect();
    let mean = per_source.iter().sum::<f64>() / k as f64;
    Ok(PermScore { perm, per_source, mean })
}

/// Score of the unprocessed mixture used as every estimate.
pub fn baseline_score(mixture: &[f64], reference: &Stack) -> Result<f64> {
    let mut total = 0.0;
    for r in reference.rows() {
        total += si_sdr(mixture, r)?;
    }
    Ok(total / reference.k() as f64)
}

/// One evaluated example.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub id: usize,
    pub score: PermScore,
    pub baseline: f64,
}

/// Per-example scores with aggregates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreReport {
    pub rows: Vec<ScoreRow>,
}

impl ScoreReport {
    pub fn mean(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.score.mean))
    }

    pub fn median(&self) -> f64 {
        let mut v: Vec<f64> = self.rows.iter().map(|r| r.score.mean).collect();
        if v.is_empty() {
            return f64::NAN;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }

    pub fn baseline_mean(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.baseline))
    }

    /// `id,perm,sisdr_src1..K,sisdr_mean,baseline_mean`.
    pub fn to_csv(&self) -> String {
        let k = self.rows.first().map_or(0, |r| r.score.per_source.len());
        let mut out = String::from("id,perm");
        for i in 1..=k {
            out.push_str(&format!(",sisdr_src{i}"));
        }
        out.push_str(",sisdr_mean,baseline_mean\n");
        for r in &self.rows {
            out.push_str(&format!("{},{}", r.id, r.score.perm));
            for v in &r.score.per_source {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push_str(&format!(",{:.6},{:.6}\n", r.score.mean, r.baseline));
        }
        out
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = noise(&mut rng, 256);
        assert_eq!(si_sdr(&r, &r).unwrap(), CLAMP_DB);
        let mut n = noise(&mut rng, 256);
        let rr: f64 = r.iter().map(|v| v * v).sum();
        let proj = n.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / rr;
        n.iter_mut().zip(&r).for_each(|(a, b)| *a -= proj * b);
        let nn: f64 = n.iter().map(|v| v * v).sum();
        let g = (rr / 10.0 / nn).sqrt();
        let est: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + g * b).collect();
        assert!((si_sdr(&est, &r).unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(si_sdr(&n, &r).unwrap(), -CLAMP_DB);
        assert!(si_sdr(&r, &[0.0; 256]).is_err());
    }

    #[test]
    fn orthogonal_estimate_is_clamped_low() {
        let r = [1.0, 0.0, 0.0, 0.0];
        let e = [0.0, 1.0, 0.0, 0.0];
        assert_eq!(si_sdr(&e, &r).unwrap(), -CLAMP_DB);
    }

    #[test]
    fn permuted_estimate_scores_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let refs = Stack::new(3, 64, noise(&mut rng, 192)).unwrap();
        let p = Permutation::new(vec![2, 0, 1]).unwrap();
        let est = p.apply(&refs);
        let s = best_perm_score(&est, &refs).unwrap();
        assert_eq!(s.mean, CLAMP_DB);
        assert_eq!(s.perm, p.inverse());
    }

    #[test]
    fn brute_force_equals_hungarian() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let refs = Stack::new(3, 32, noise(&mut rng, 96)).unwrap();
            let est = Stack::new(3, 32, noise(&mut rng, 96)).unwrap();
            let brute = best_perm_score(&est, &refs).unwrap();
            let mut m = vec![0.0; 9];
            for r in 0..3 {
                for e in 0..3 {
                    m[r * 3 + e] = -si_sdr(est.row(e), refs.row(r)).unwrap();
                }
            }
            let h = optimal_matching(&m, 3);
            let hs: f64 = h.iter().enumerate().map(|(r, &e)| -m[r * 3 + e]).sum::<f64>() / 3.0;
            assert!((hs - brute.mean).abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_is_mean_of_mixture_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let refs = Stack::new(2, 64, noise(&mut rng, 128)).unwrap();
        let mixture: Vec<f64> = (0..64).map(|i| refs.row(0)[i] + refs.row(1)[i]).collect();
        let est = Stack::from_rows(&[&mixture, &mixture]).unwrap();
        let b = baseline_score(&mixture, &refs).unwrap();
        assert!((best_perm_score(&est, &refs).unwrap().mean - b).abs() < 1e-12);
        let want = (si_sdr(&mixture, refs.row(0)).unwrap() + si_sdr(&mixture, refs.row(1)).unwrap()) / 2.0;
        assert_eq!(b, want);
    }

    #[test]
    fn csv_layout() {
        let report = ScoreReport {
            rows: vec![ScoreRow {
                id: 0,
                score: PermScore { perm: Permutation::new(vec![1, 0]).unwrap(), per_source: vec![1.0, 2.0], mean: 1.5 },
                baseline: -0.5,
            }],
        };
        let csv = report.to_csv();
        assert_eq!(csv.lines().next().unwrap(), "id,perm,sisdr_src1,sisdr_src2,sisdr_mean,baseline_mean");
        assert_eq!(csv.lines().nth(1).unwrap(), "0,1-0,1.000000,2.000000,1.500000,-0.500000");
        assert_eq!(report.median(), 1.5);
    }

    proptest! {
        #[test]
        fn scale_invariance(seed in 0u64..1000, c in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = noise(&mut rng, 64);
            let e = noise(&mut rng, 64);
            let ce: Vec<f64> = e.iter().map(|v| c * v).collect();
            prop_assert!((si_sdr(&ce, &r).unwrap() - si_sdr(&e, &r).unwrap()).abs() <= 1e-9);
        }

        #[test]
        fn best_score_dominates_and_ignores_order(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let refs = Stack::new(3, 32, noise(&mut rng, 96)).unwrap();
            let est = Stack::new(3, 32, noise(&mut rng, 96)).unwrap();
            let best = best_perm_score(&est, &refs).unwrap();
            for p in Permutation::all(3) {
                let fixed: f64 = (0..3).map(|r| si_sdr(est.row(p.as_slice()[r]), refs.row(r)).unwrap()).sum::<f64>() / 3.0;
                prop_assert!(best.mean >= fixed - 1e-12);
                let shuffled = best_perm_score(&p.apply(&est), &refs).unwrap();
                prop_assert!((shuffled.mean - best.mean).abs() <= 1e-12);
            }
        }
    }
}
