//! Property tests over the public API.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flowsep::assignment::{hungarian, Permutation};
use flowsep::dsp::{compress, decompress, StftConfig};
use flowsep::eqnet::{NetConfig, VelocityModel};
use flowsep::flowpath::{interpolate, target, wrap_drift, FlowPair, FlowState};
use flowsep::geometry::{project_perp, MeanStack, Stack};
use flowsep::losses::{sample_time, snr_to_time, TimeWeighting};
use flowsep::noiseshape::{NoiseConfig, NoiseKind};
use flowsep::pipeline::{example_seed, DataConfig, Stream};
use flowsep::sampler::{make_schedule, ScheduleKind};

fn stack(seed: u64, k: usize, l: usize) -> Stack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Stack::new(k, l, (0..k * l).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn perm_of(k: usize, idx: usize) -> Permutation {
    let all = Permutation::all(k);
    all[idx % all.len()].clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permutation_group_laws(k in 1usize..6, a in 0usize..720, b in 0usize..720, seed in any::<u64>()) {
        let (p, q) = (perm_of(k, a), perm_of(k, b));
        let x = stack(seed, k, 5);
        prop_assert_eq!(p.compose(&p.inverse()), Permutation::identity(k));
        prop_assert_eq!(p.inverse().apply(&p.apply(&x)), x.clone());
        prop_assert_eq!(p.apply(&q.apply(&x)), q.compose(&p).apply(&x));
    }

    #[test]
    fn hungarian_is_optimal(n in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..10.0)).collect();
        let got = hungarian(&cost, n);
        let total = |m: &[usize]| m.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>();
        let best = Permutation::all(n).iter().map(|p| total(p.as_slice())).fold(f64::INFINITY, f64::min);
        prop_assert!((total(&got) - best).abs() <= 1e-9 * best.max(1.0));
    }

    #[test]
    fn start_point_is_mixture_consistent(k in 2usize..5, seed in any::<u64>()) {
        let pair = FlowPair::from_noise(stack(seed, k, 64), stack(seed ^ 1, k, 64)).unwrap();
        prop_assert!(pair.cond.consistency_error(&pair.x0) <= 1e-12);
        prop_assert!(pair.cond.consistency_error(&pair.x1) <= 1e-12);
        let t = target(&pair);
        prop_assert!(t.column_mean().iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn path_endpoints_and_linearity(seed in any::<u64>(), t in 0.0f64..=1.0) {
        let pair = FlowPair::from_noise(stack(seed, 3, 32), stack(seed ^ 2, 3, 32)).unwrap();
        prop_assert_eq!(interpolate(&pair, 0.0).unwrap().x, pair.x0.clone());
        let end = interpolate(&pair, 1.0).unwrap().x;
        prop_assert!(end.dist_sq(&pair.x1) <= 1e-24);
        let mid = interpolate(&pair, t).unwrap().x;
        let mut want = pair.x0.clone();
        want.axpy(t, &target(&pair)).unwrap();
        prop_assert!(mid.dist_sq(&want) <= 1e-24);
    }

    #[test]
    fn drift_stays_on_the_slice(seed in any::<u64>(), t in 0.0f64..1.0) {
        let pair = FlowPair::from_noise(stack(seed, 3, 32), stack(seed ^ 3, 3, 32)).unwrap();
        let field = |_: f64, x: &Stack, c: &[f64]| -> flowsep::Result<Stack> {
            let l = x.l();
            let mut v = x.map(|a| a.sin() + 3.0);
            for row in v.as_mut_slice().chunks_exact_mut(l) {
                row.iter_mut().zip(c).for_each(|(a, b)| *a *= b);
            }
            Ok(v)
        };
        let v = wrap_drift(&field, &FlowState { t, x: pair.x0.clone() }, &pair.cond).unwrap();
        prop_assert!(v.column_mean().iter().all(|a| a.abs() <= 1e-12));
        prop_assert!(v.dist_sq(&project_perp(&v)) <= 1e-24);
    }

    #[test]
    fn time_samples_lie_in_unit_interval(seed in any::<u64>(), p0 in 0.001f64..0.999) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in [TimeWeighting::HalfDelta, TimeWeighting::MostlyUniform { p0 }, TimeWeighting::default()] {
            for _ in 0..50 {
                let t = sample_time(&w, &mut rng);
                prop_assert!((0.0..=1.0).contains(&t));
            }
        }
    }

    #[test]
    fn snr_map_is_monotone(a in -120.0f64..120.0, b in -120.0f64..120.0) {
        let (ta, tb) = (snr_to_time(a), snr_to_time(b));
        prop_assert!((0.0..=1.0).contains(&ta));
        if a < b {
            prop_assert!(ta <= tb);
        }
        prop_assert!((snr_to_time(a) + snr_to_time(-a) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn linear_schedules_are_uniform(n in 1usize..200) {
        let s = make_schedule(ScheduleKind::Linear(n)).unwrap();
        prop_assert_eq!(s.n_steps(), n);
        prop_assert_eq!(s.times[0], 0.0);
        prop_assert_eq!(*s.times.last().unwrap(), 1.0);
        prop_assert!(s.steps().all(|(_, dt)| (dt - 1.0 / n as f64).abs() <= 1e-12));
    }

    #[test]
    fn compression_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y = decompress(&compress(&x));
        prop_assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0)));
    }

    #[test]
    fn stft_round_trip(seed in any::<u64>(), len in 320usize..2000) {
        let stft = StftConfig::for_sample_rate(16_000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = stft.istft(&stft.stft(&x).unwrap(), len).unwrap();
        prop_assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() <= 1e-10));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn network_is_permutation_equivariant(k in 2usize..5, idx in 0usize..24, seed in any::<u64>(), t in 0.0f64..1.0) {
        let mut model = VelocityModel::new(NetConfig::tiny()).unwrap();
        model.perturb(seed, 0.2);
        let x = project_perp(&stack(seed, k, 640));
        let cond = stack(seed ^ 5, 1, 640).into_vec();
        let p = perm_of(k, idx);
        let y = model.forward(t, &x, &cond).unwrap();
        let yp = model.forward(t, &p.apply(&x), &cond).unwrap();
        prop_assert!(yp.dist_sq(&p.apply(&y)) <= 1e-20 * y.norm_sq());
    }

    #[test]
    fn synthetic_examples_are_consistent_and_reproducible(seed in any::<u64>()) {
        let data = DataConfig { source_seconds: 0.6, crop_seconds: 0.2, ..DataConfig::default() };
        let noise = NoiseConfig { kind: NoiseKind::Envelope, ..NoiseConfig::default() };
        let s = example_seed(seed, Stream::Train, 0);
        let a = data.example(&noise, 16_000, s).unwrap();
        prop_assert_eq!(&a, &data.example(&noise, 16_000, s).unwrap());
        prop_assert_eq!(a.x1.l(), 3200);
        let cond = MeanStack::from_mean(a.x1.column_mean(), 2);
        prop_assert!(cond.consistency_error(&a.x0) <= 1e-12);
    }
}
