//! BSJA and TSPA dual-path blocks on `[T, B, S, O]` token grids.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

pub(crate) const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Bsja,
    Tspa,
}

/// Parameter ids of one block.
#[derive(Clone, Debug)]
pub(crate) struct BlockParams {
    pub kind: BlockKind,
    pub norm1: usize,
    pub qkv: usize,
    pub out: usize,
    pub norm2: usize,
    pub mlp_a: usize,
    pub mlp_b: usize,
    pub mlp_out: usize,
}

/// Static sizes shared by all blocks.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Dims {
    pub t: usize,
    pub b: usize,
    pub s: usize,
    pub o: usize,
    pub heads: usize,
    pub groups: usize,
}

impl Dims {
    fn shape(&self) -> [usize; 4] {
        [self.t, self.b, self.s, self.o]
    }

    fn dh(&self) -> usize {
        self.o / self.heads
    }
}

pub(crate) fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            std * z
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl BlockParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        kind: BlockKind,
        o: usize,
        hidden: usize,
        time_kernel: usize,
        band_kernel: usize,
    ) -> Result<Self> {
        let (qk, mk) = match kind {
            BlockKind::Bsja => ([time_kernel, 1], [time_kernel, 1]),
            BlockKind::Tspa => ([time_kernel, band_kernel], [1, band_kernel]),
        };
        let fan = |k: [usize; 2], i: usize| 1.0 / ((k[0] * k[1] * i) as f64).sqrt();
        Ok(Self {
            kind,
            norm1: store.add(&format!("{prefix}.norm1"), Tensor::full(&[o], 1.0))?,
            qkv: store.add(&format!("{prefix}.qkv"), normal(rng, &[qk[0], qk[1], o, 3 * o], fan(qk, o)))?,
            out: store.add(&format!("{prefix}.out"), Tensor::zeros(&[o, o]))?,
            norm2: store.add(&format!("{prefix}.norm2"), Tensor::full(&[o], 1.0))?,
            mlp_a: store.add(&format!("{prefix}.mlp_a"), normal(rng, &[mk[0], mk[1], o, hidden], fan(mk, o)))?,
            mlp_b: store.add(&format!("{prefix}.mlp_b"), normal(rng, &[mk[0], mk[1], o, hidden], fan(mk, o)))?,
            mlp_out: store.add(&format!("{prefix}.mlp_out"), Tensor::zeros(&[hidden, o]))?,
        })
    }
}

/// `n (1 + scale) + shift` with `[O]` scale and shift broadcast over the grid.
pub(crate) fn modulate(tape: &mut Tape, n: Var, scale: Var, shift: Var) -> Result<Var> {
    let shape = tape.shape(n).to_vec();
    let last = shape.len() - 1;
    let sc = tape.expand(scale, &shape, &[last])?;
    let sh = tape.expand(shift, &shape, &[last])?;
    let ns = tape.mul(n, sc)?;
    let y = tape.add(n, ns)?;
    tape.add(y, sh)
}

/// Softmax attention on `[G, N, dh]` queries, keys and values.
pub(crate) fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let dh = *tape.shape(q).last().unwrap();
    let scores = tape.bmm(q, k, true, 1.0 / (dh as f64).sqrt())?;
    let w = tape.softmax(scores);
    tape.bmm(w, v, false, 1.0)
}

/// Pulls q, k and v out of a packed `[grid.., 3O]` projection. `order`
/// permutes the `grid + [3, H, dh]` axes so that the packed axis comes first
/// and the attended axis second to last; each result is `[groups, seq, dh]`.
fn split_heads(tape: &mut Tape, qkv: Var, grid: &[usize], heads: usize, dh: usize, order: &[usize]) -> Result<[Var; 3]> {
    let mut shape = grid.to_vec();
    shape.extend_from_slice(&[3, heads, dh]);
    let x = tape.reshape(qkv, &shape)?;
    let x = tape.permute(x, order)?;
    let pshape = tape.shape(x).to_vec();
    let seq = pshape[pshape.len() - 2];
    let groups: usize = pshape[1..pshape.len() - 2].iter().product();
    let mut out = [x; 3];
    for (i, slot) in out.iter_mut().enumerate() {
        let s = tape.slice(x, 0, i, 1)?;
        *slot = tape.reshape(s, &[groups, seq, dh])?;
    }
    Ok(out)
}

/// Runs one block; `mods` holds the `[scale1, shift1, scale2, shift2]` rows.
pub(crate) fn block_forward(
    tape: &mut Tape,
    bound: &Bound,
    p: &BlockParams,
    d: Dims,
    h: Var,
    mods: [Var; 4],
) -> Result<Var> {
    let shape = d.shape();
    let (dh, heads) = (d.dh(), d.heads);
    let n = tape.rms_group_norm(h, bound.var(p.norm1), d.groups, NORM_EPS)?;
    let n = modulate(tape, n, mods[0], mods[1])?;

    let mixed = match p.kind {
        BlockKind::Bsja => {
            let bs = d.b * d.s;
            let x = tape.reshape(n, &[d.t, 1, bs, d.o])?;
            let qkv = tape.conv(x, bound.var(p.qkv))?;
            // grid [T, BS] + [3, H, dh] -> [3, T, H, BS, dh]
            let [q, k, v] = split_heads(tape, qkv, &[d.t, bs], heads, dh, &[2, 0, 3, 1, 4])?;
            let a = attention(tape, q, k, v)?;
            let a = tape.reshape(a, &[d.t, heads, bs, dh])?;
            let a = tape.permute(a, &[0, 2, 1, 3])?;
            tape.reshape(a, &shape)?
        }
        BlockKind::Tspa => {
            let qkv = tape.conv(n, bound.var(p.qkv))?;
            let grid = [d.t, d.b, d.s];
            // time axis: [3, B, S, H, T, dh]
            let [q, k, v] = split_heads(tape, qkv, &grid, heads, dh, &[3, 1, 2, 4, 0, 5])?;
            let at = attention(tape, q, k, v)?;
            let at = tape.reshape(at, &[d.b, d.s, heads, d.t, dh])?;
            let at = tape.permute(at, &[3, 0, 1, 2, 4])?;
            let at = tape.reshape(at, &shape)?;
            // source axis: [3, T, B, H, S, dh]
            let [q, k, v] = split_heads(tape, qkv, &grid, heads, dh, &[3, 0, 1, 4, 2, 5])?;
            let as_ = attention(tape, q, k, v)?;
            let as_ = tape.reshape(as_, &[d.t, d.b, heads, d.s, dh])?;
            let as_ = tape.permute(as_, &[0, 1, 3, 2, 4])?;
            let as_ = tape.reshape(as_, &shape)?;
            tape.add(at, as_)?
        }
    };
    let y = tape.linear(mixed, bound.var(p.out))?;
    let h = tape.add(h, y)?;

    let n = tape.rms_group_norm(h, bound.var(p.norm2), d.groups, NORM_EPS)?;
    let n = modulate(tape, n, mods[2], mods[3])?;
    let x = match p.kind {
        BlockKind::Bsja => tape.reshape(n, &[d.t, 1, d.b * d.s, d.o])?,
        BlockKind::Tspa => n,
    };
    let a = tape.conv(x, bound.var(p.mlp_a))?;
    let b = tape.conv(x, bound.var(p.mlp_b))?;
    let a = tape.swish(a);
    let g = tape.mul(a, b)?;
    let y = tape.linear(g, bound.var(p.mlp_out))?;
    let y = tape.reshape(y, &shape)?;
    tape.add(h, y)
}
