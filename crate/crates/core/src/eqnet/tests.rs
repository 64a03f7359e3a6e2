use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::project_perp;

fn random_stack(seed: u64, k: usize, l: usize) -> Stack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Stack::new(k, l, (0..k * l).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap()
}

fn small_cfg() -> NetConfig {
    NetConfig { embed_dim: 8, n_heads: 2, n_bands: 4, n_blocks: 1, ..NetConfig::default() }
}

fn rel(a: &Stack, b: &Stack) -> f64 {
    (a.dist_sq(b) / b.norm_sq()).sqrt()
}

#[test]
fn zero_input_gives_finite_output() {
    let model = VelocityModel::new(small_cfg()).unwrap();
    let y = model.forward(0.0, &Stack::zeros(2, 640), &[0.0; 640]).unwrap();
    assert_eq!((y.k(), y.l()), (2, 640));
    assert!(y.is_finite());
}

#[test]
fn swapping_sources_swaps_outputs() {
    let mut model = VelocityModel::new(small_cfg()).unwrap();
    model.perturb(1, 0.2);
    let x = project_perp(&random_stack(2, 3, 700));
    let cond = random_stack(3, 1, 700).into_vec();
    let y = model.forward(0.4, &x, &cond).unwrap();
    for perm in [[1, 0, 2], [2, 0, 1], [1, 2, 0]] {
        let yp = model.forward(0.4, &x.permute_rows(&perm), &cond).unwrap();
        assert!(rel(&yp, &y.permute_rows(&perm)) <= 1e-10);
    }
}

#[test]
fn mixture_token_is_distinguished() {
    let mut model = VelocityModel::new(small_cfg()).unwrap();
    model.perturb(4, 0.2);
    let a = random_stack(5, 3, 640);
    let x = Stack::from_rows(&[a.row(0), a.row(1)]).unwrap();
    let swapped = Stack::from_rows(&[a.row(2), a.row(1)]).unwrap();
    let y1 = model.forward(0.5, &x, a.row(2)).unwrap();
    let y2 = model.forward(0.5, &swapped, a.row(0)).unwrap();
    assert!(rel(&y2, &y1) > 1e-6);
}

#[test]
fn output_has_zero_column_sums() {
    let mut model = VelocityModel::new(small_cfg()).unwrap();
    model.perturb(6, 0.1);
    let x = project_perp(&random_stack(7, 2, 640));
    let y = model.forward(0.9, &x, random_stack(8, 1, 640).as_slice()).unwrap();
    let scale = y.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for c in y.column_mean() {
        assert!(c.abs() <= 1e-12 * scale.max(1.0));
    }
}

#[test]
fn fresh_blocks_are_pure_residuals() {
    let model = VelocityModel::new(small_cfg()).unwrap();
    let d = model.dims(5, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h0 = normal(&mut rng, &[d.t, d.b, d.s, d.o], 1.0);
    for layer in 0..model.n_layers() {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, false);
        let mods = model.time_mods(&mut tape, &bound, 0.2).unwrap();
        let h = tape.constant(h0.clone());
        let y = model.run_block(&mut tape, &bound, mods, layer, h, d).unwrap();
        let marker = model.params.get(model.ids.marker).data();
        for (i, (a, b)) in tape.value(y).data().chunks(d.o).zip(h0.data().chunks(d.o)).enumerate() {
            let mixture = i % d.s == d.s - 1;
            for j in 0..d.o {
                let expect = b[j] + if mixture { marker[j] } else { 0.0 };
                assert!((a[j] - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn time_conditioning() {
    let model = VelocityModel::new(small_cfg()).unwrap();
    assert_eq!(model.condition_time(0.3).unwrap(), model.condition_time(0.3).unwrap());
    let m0 = model.condition_time(0.0).unwrap();
    let m1 = model.condition_time(1.0).unwrap();
    assert_eq!(m0.len(), model.cfg.n_mod_rows() * model.cfg.embed_dim);
    assert!(m0.iter().zip(&m1).any(|(a, b)| (a - b).abs() > 1e-6));
    assert!(model.condition_time(1.5).is_err());
}

#[test]
fn hybrid_mask_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let n = 24;
    let (xin, mix) = (r(n), r(n));
    let zeros = vec![0.0; n];
    let ones: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
    assert_eq!(hybrid_mask(&zeros, &ones, &xin, &zeros, &mix).unwrap(), xin);
    assert_eq!(hybrid_mask(&zeros, &zeros, &xin, &zeros, &mix).unwrap(), zeros);

    let (map, mi, mm) = (r(n), r(n), r(n));
    let plain = hybrid_mask(&map, &mi, &xin, &mm, &mix).unwrap();
    for c in 0..n / 2 {
        let (re, im) = (2 * c, 2 * c + 1);
        let ore = map[re] + mi[re] * xin[re] - mi[im] * xin[im] + mm[re] * mix[re] - mm[im] * mix[im];
        let oim = map[im] + mi[re] * xin[im] + mi[im] * xin[re] + mm[re] * mix[im] + mm[im] * mix[re];
        assert!((plain[re] - ore).abs() <= 1e-12 && (plain[im] - oim).abs() <= 1e-12);
    }
    let mut tape = Tape::new();
    let shape = vec![n / 2, 2];
    let mut c = |v: &Vec<f64>| tape.constant(Tensor::new(shape.clone(), v.clone()).unwrap());
    let vars = [c(&map), c(&mi), c(&xin), c(&mm), c(&mix)];
    let y = hybrid_mask_tape(&mut tape, vars[0], vars[1], vars[2], vars[3], vars[4]).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(&plain) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn block_gradients_on_tiny_config() {
    let mut model = VelocityModel::new(NetConfig::tiny()).unwrap();
    model.perturb(11, 0.3);
    for layer in 0..model.n_layers() {
        let r = model.grad_check_block(layer, 2, 4, 12, 6).unwrap();
        assert!(r.max_rel_error <= 1e-4, "layer {layer}: {r:?}");
    }
}

#[test]
fn config_validation() {
    assert!(NetConfig { embed_dim: 10, n_heads: 4, ..NetConfig::default() }.validate().is_err());
    assert!(NetConfig { bsja_time_kernel: 4, ..NetConfig::default() }.validate().is_err());
    assert!(NetConfig::default().validate().is_ok());
    assert!(NetConfig::tiny().validate().is_ok());
}
