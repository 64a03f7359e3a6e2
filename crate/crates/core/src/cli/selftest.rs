//! Built-in invariant checks.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assignment::{pit_assign, Permutation};
use crate::dsp::{Codec, StftConfig};
use crate::eqnet::{NetConfig, VelocityModel};
use crate::error::{Error, Result};
use crate::flowpath::FlowPair;
use crate::geometry::{project_mean, project_perp, MeanStack, Stack};
use crate::losses::{loss_grad_check, loss_raw, LossConfig};
use crate::noiseshape::{NoiseConfig, NoiseKind};
use crate::sampler::{separate, make_schedule, ScheduleKind};
use crate::tensor::{read_checkpoint, write_checkpoint};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn stack(rng: &mut ChaCha8Rng, k: usize, l: usize) -> Stack {
    Stack::new(k, l, (0..k * l).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("valid shape")
}

fn rel(a: &Stack, b: &Stack) -> f64 {
    (a.dist_sq(b) / b.norm_sq().max(f64::MIN_POSITIVE)).sqrt()
}

fn bound(name: &'static str, value: f64, tol: f64) -> Result<String> {
    if value <= tol {
        Ok(format!("{name} {value:.2e} <= {tol:.0e}"))
    } else {
        Err(Error::Check(format!("{name} {value:.3e} exceeds {tol:.0e}")))
    }
}

fn projectors(rng: &mut ChaCha8Rng) -> Result<String> {
    let mut worst = 0.0f64;
    for k in 2..=4 {
        let x = stack(rng, k, 64);
        let p = project_perp(&x);
        worst = worst.max(rel(&project_perp(&p), &p));
        worst = worst.max(rel(&p.add(&project_mean(&x))?, &x));
        worst = worst.max(p.column_mean().iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    bound("max error", worst, 1e-12)
}

fn model(rng: &mut ChaCha8Rng) -> Result<VelocityModel> {
    let mut m = VelocityModel::new(NetConfig::tiny())?;
    m.perturb(rng.random(), 0.2);
    Ok(m)
}

fn equivariance(rng: &mut ChaCha8Rng) -> Result<String> {
    let m = model(rng)?;
    let mut worst = 0.0f64;
    for k in 2..=3 {
        let x = project_perp(&stack(rng, k, 640));
        let cond = stack(rng, 1, 640).into_vec();
        let y = m.forward(0.3, &x, &cond)?;
        for p in Permutation::all(k) {
            worst = worst.max(rel(&m.forward(0.3, &p.apply(&x), &cond)?, &p.apply(&y)));
        }
    }
    bound("max rel error", worst, 1e-10)
}

fn pit_oracle(rng: &mut ChaCha8Rng) -> Result<String> {
    let m = model(rng)?;
    for _ in 0..5 {
        let pair = FlowPair::from_noise(stack(rng, 3, 640), stack(rng, 3, 640))?;
        let got = pit_assign(&m, &pair, 4)?;
        let mut best = (f64::INFINITY, Permutation::identity(3));
        for p in Permutation::all(3) {
            let l = loss_raw(&m, &pair, &p, 0.0)?;
            if l < best.0 {
                best = (l, p);
            }
        }
        if got != best.1 {
            return Err(Error::Check(format!("PIT chose {got}, enumeration {}", best.1)));
        }
    }
    Ok("5 instances agree with enumeration".into())
}

fn grad_checks(rng: &mut ChaCha8Rng) -> Result<String> {
    let m = model(rng)?;
    let mut worst = 0.0f64;
    for layer in 0..m.n_layers() {
        worst = worst.max(m.grad_check_block(layer, 2, 4, rng.random(), 4)?.max_rel_error);
    }
    let pair = FlowPair::from_noise(stack(rng, 2, 640), stack(rng, 2, 640))?;
    let r = loss_grad_check(&m, &pair, &Permutation::identity(2), 0.4, &LossConfig::default(), 2)?;
    bound("max rel error", worst.max(r.max_rel_error), 1e-4)
}

fn codec(rng: &mut ChaCha8Rng) -> Result<String> {
    let codec = Codec::new(StftConfig::for_sample_rate(16_000)?, 80, 192, true)?;
    let x: Vec<f64> = (0..16_000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (feats, frames) = codec.encode(&x)?;
    let back = codec.decode(&feats, frames, x.len())?;
    let a = Stack::new(1, x.len(), back)?;
    let b = Stack::new(1, x.len(), x)?;
    bound("rel error", rel(&a, &b), 1e-5)
}

fn sampler(rng: &mut ChaCha8Rng) -> Result<String> {
    let m = model(rng)?;
    let noise = NoiseConfig { kind: NoiseKind::Envelope, ..Default::default() };
    let mut worst = 0.0f64;
    for kind in [ScheduleKind::Linear(25), ScheduleKind::Custom5, ScheduleKind::Single] {
        let schedule = make_schedule(kind)?;
        let y: Vec<f64> = (0..4000).map(|_| rng.random_range(-0.3..0.3)).collect();
        let cond = MeanStack::from_mixture(&y, 2)?;
        let shaper = noise.shaper(cond.mean(), 16_000)?;
        let x = separate(&m, &y, 2, &shaper, &schedule, rng.random())?;
        worst = worst.max(cond.consistency_error(&x));
    }
    bound("row-mean deviation", worst, 1e-6)
}

fn checkpoint(rng: &mut ChaCha8Rng) -> Result<String> {
    let m = model(rng)?;
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, "selftest", &[("params", m.params())])?;
    let (meta, sections) = read_checkpoint(&mut buf.as_slice())?;
    if meta != "selftest" || sections[0].1.tensors() != m.params().tensors() {
        return Err(Error::Check("round trip changed the weights".into()));
    }
    buf[0] ^= 0xff;
    match read_checkpoint(&mut buf.as_slice()) {
        Err(Error::Checkpoint(msg)) => Ok(format!("round trip exact; corrupted magic rejected ({msg})")),
        Err(e) => Err(e),
        Ok(_) => Err(Error::Check("corrupted magic was accepted".into())),
    }
}

/// Runs every check; the report depends only on `seed`.
pub fn run_selftest(seed: u64) -> Vec<CheckResult> {
    type Check = fn(&mut ChaCha8Rng) -> Result<String>;
    let checks: [(&'static str, Check); 7] = [
        ("projector algebra", projectors),
        ("permutation equivariance", equivariance),
        ("PIT oracle", pit_oracle),
        ("gradient checks", grad_checks),
        ("codec round trip", codec),
        ("sampler consistency", sampler),
        ("checkpoint format", checkpoint),
    ];
    checks
        .iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(i as u64));
            match f(&mut rng) {
                Ok(detail) => CheckResult { name, passed: true, detail },
                Err(e) => CheckResult { name, passed: false, detail: e.to_string() },
            }
        })
        .collect()
}
