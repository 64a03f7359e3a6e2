//! Permutation-equivariant velocity network.
//!
//! Every source of the centered state and the mixture mean becomes a token
//! sequence over (time, band). Tokens pass through alternating BSJA and TSPA
//! blocks, and a hybrid mask head turns the source tokens back into
//! waveforms. Sources only interact through attention along the source axis,
//! which carries no position information, so relabeling the input sources
//! relabels the output in the same way. The mixture token carries a learned
//! marker instead.

mod blocks;
mod ops;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use blocks::BlockKind;
use blocks::{block_forward, normal, BlockParams, Dims, NORM_EPS};
use ops::{BandUnsplit, FrameSynth, OverlapAdd};

use crate::dsp::{global_norm, MelSplit, StftConfig, COMPRESS_EXPONENT};
use crate::error::{Error, Result};
use crate::flowpath::VelocityField;
use crate::geometry::Stack;
use crate::tensor::{grad_check, Bound, GradCheckReport, ParamStore, Tape, Tensor, Var};

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Number of (BSJA, TSPA) block pairs.
    pub n_blocks: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_bands: usize,
    pub norm_groups: usize,
    /// Hidden width of the gated MLPs as a multiple of `embed_dim`.
    pub mlp_mult: usize,
    pub bsja_time_kernel: usize,
    pub tspa_kernel: [usize; 2],
    pub time_embed_dim: usize,
    pub time_hidden: usize,
    pub sample_rate: u32,
    pub init_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            embed_dim: 32,
            n_heads: 4,
            n_bands: 16,
            norm_groups: 4,
            mlp_mult: 2,
            bsja_time_kernel: 5,
            tspa_kernel: [5, 3],
            time_embed_dim: 16,
            time_hidden: 32,
            sample_rate: 16000,
            init_seed: 0,
        }
    }
}

impl NetConfig {
    /// The smallest configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self { n_blocks: 1, embed_dim: 8, n_heads: 2, n_bands: 4, time_embed_dim: 8, time_hidden: 8, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_blocks == 0 {
            return bad("n_blocks must be at least 1".into());
        }
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return bad(format!("embed_dim {} not divisible by n_heads {}", self.embed_dim, self.n_heads));
        }
        if self.norm_groups == 0 || self.embed_dim % self.norm_groups != 0 {
            return bad(format!("embed_dim {} not divisible by norm_groups {}", self.embed_dim, self.norm_groups));
        }
        let k = [self.bsja_time_kernel, self.tspa_kernel[0], self.tspa_kernel[1]];
        if k.iter().any(|&v| v == 0 || v % 2 == 0) {
            return bad(format!("convolution kernels must be odd, got {k:?}"));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be even".into());
        }
        if self.mlp_mult == 0 || self.time_hidden == 0 || self.n_bands == 0 {
            return bad("mlp_mult, time_hidden and n_bands must be positive".into());
        }
        Ok(())
    }

    fn n_layers(&self) -> usize {
        2 * self.n_blocks
    }

    /// One scale and one shift per norm; each layer has two norms and the
    /// decoder one more.
    fn n_mod_rows(&self) -> usize {
        2 * (2 * self.n_layers() + 1)
    }
}

#[derive(Clone, Debug)]
struct ModelIds {
    enc_proj: usize,
    band_emb: usize,
    marker: usize,
    t_w1: usize,
    t_b1: usize,
    t_w2: usize,
    t_b2: usize,
    blocks: Vec<BlockParams>,
    final_norm: usize,
    decoder: usize,
}

/// Fixed (non-learned) encodings of one forward call.
struct Encoded {
    t: usize,
    /// `[T, B, S, O]`, normalized per token.
    feats: Tensor,
    /// Compressed-domain scale of the mixture token.
    mix_std: f64,
    /// Linear STFT of each source input, `[K, T, F, 2]`.
    spec_in: Tensor,
    /// Linear STFT of the mixture mean, repeated over sources.
    spec_mix: Tensor,
}

/// The velocity network with its EMA shadow weights.
#[derive(Clone)]
pub struct VelocityModel {
    cfg: NetConfig,
    stft: StftConfig,
    split: Arc<MelSplit>,
    ids: ModelIds,
    params: ParamStore,
    ema: ParamStore,
    use_ema: bool,
}

impl std::fmt::Debug for VelocityModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VelocityModel")
            .field("cfg", &self.cfg)
            .field("n_params", &self.params.num_values())
            .field("use_ema", &self.use_ema)
            .finish()
    }
}

/// Sinusoidal features of `t` with geometrically spaced frequencies up to 1000.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let f = 1000f64.powf(j as f64 / (half.max(2) - 1) as f64);
        out.push((f * t).sin());
    }
    for j in 0..half {
        let f = 1000f64.powf(j as f64 / (half.max(2) - 1) as f64);
        out.push((f * t).cos());
    }
    out
}

/// `mapping + mask_in * xin + mask_mix * mix` on interleaved complex values.
pub fn hybrid_mask(mapping: &[f64], mask_in: &[f64], xin: &[f64], mask_mix: &[f64], mix: &[f64]) -> Result<Vec<f64>> {
    let n = mapping.len();
    if [mask_in.len(), xin.len(), mask_mix.len(), mix.len()].iter().any(|&m| m != n) || n % 2 != 0 {
        return Err(Error::shape("hybrid_mask: all inputs must share one interleaved length"));
    }
    let mut out = mapping.to_vec();
    for i in (0..n).step_by(2) {
        out[i] += mask_in[i] * xin[i] - mask_in[i + 1] * xin[i + 1] + mask_mix[i] * mix[i] - mask_mix[i + 1] * mix[i + 1];
        out[i + 1] +=
            mask_in[i] * xin[i + 1] + mask_in[i + 1] * xin[i] + mask_mix[i] * mix[i + 1] + mask_mix[i + 1] * mix[i];
    }
    Ok(out)
}

/// Tape version of [`hybrid_mask`].
pub fn hybrid_mask_tape(tape: &mut Tape, mapping: Var, mask_in: Var, xin: Var, mask_mix: Var, mix: Var) -> Result<Var> {
    let a = tape.cmul(mask_in, xin)?;
    let b = tape.cmul(mask_mix, mix)?;
    let y = tape.add(mapping, a)?;
    tape.add(y, b)
}

impl VelocityModel {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let stft = StftConfig::for_sample_rate(cfg.sample_rate)?;
        let split = Arc::new(MelSplit::new(cfg.sample_rate, stft.n_bins(), cfg.n_bands, cfg.embed_dim, false)?);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let o = cfg.embed_dim;
        let enc_proj = store.add("enc.proj", normal(&mut rng, &[o, o], 1.0 / (o as f64).sqrt()))?;
        let band_emb = store.add("enc.band", normal(&mut rng, &[cfg.n_bands, o], 0.1))?;
        let marker = store.add("enc.marker", normal(&mut rng, &[o], 1.0))?;
        let (e, hd) = (cfg.time_embed_dim, cfg.time_hidden);
        let t_w1 = store.add("time.w1", normal(&mut rng, &[e, hd], 1.0 / (e as f64).sqrt()))?;
        let t_b1 = store.add("time.b1", Tensor::zeros(&[hd]))?;
        let t_w2 = store.add("time.w2", normal(&mut rng, &[hd, cfg.n_mod_rows() * o], 0.02))?;
        let t_b2 = store.add("time.b2", Tensor::zeros(&[cfg.n_mod_rows() * o]))?;
        let mut blocks = Vec::with_capacity(cfg.n_layers());
        for i in 0..cfg.n_blocks {
            for (kind, name) in [(BlockKind::Bsja, "bsja"), (BlockKind::Tspa, "tspa")] {
                blocks.push(BlockParams::register(
                    &mut store,
                    &mut rng,
                    &format!("block{i}.{name}"),
                    kind,
                    o,
                    cfg.mlp_mult * o,
                    if kind == BlockKind::Bsja { cfg.bsja_time_kernel } else { cfg.tspa_kernel[0] },
                    cfg.tspa_kernel[1],
                )?);
            }
        }
        let final_norm = store.add("dec.norm", Tensor::full(&[o], 1.0))?;
        // mapping columns start small but non-zero: the decompression has a
        // vanishing derivative at the origin
        let mut dec = Tensor::zeros(&[o, 3 * o]);
        let map_init = normal(&mut rng, &[o, o], 0.02);
        for r in 0..o {
            dec.data_mut()[r * 3 * o..r * 3 * o + o].copy_from_slice(&map_init.data()[r * o..(r + 1) * o]);
        }
        let decoder = store.add("dec.proj", dec)?;
        let ids = ModelIds { enc_proj, band_emb, marker, t_w1, t_b1, t_w2, t_b2, blocks, final_norm, decoder };
        Ok(Self { cfg, stft, split, ids, ema: store.clone(), params: store, use_ema: true })
    }

    /// Rebuilds a model from stored weights.
    pub fn from_stores(cfg: NetConfig, params: ParamStore, ema: ParamStore) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        if !m.params.same_layout(&params) || !m.params.same_layout(&ema) {
            return Err(Error::Checkpoint("stored weights do not match the network configuration".into()));
        }
        m.params = params;
        m.ema = ema;
        Ok(m)
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn stft(&self) -> &StftConfig {
        &self.stft
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn ema(&self) -> &ParamStore {
        &self.ema
    }

    pub fn ema_mut(&mut self) -> &mut ParamStore {
        &mut self.ema
    }

    /// Whether [`VelocityField::velocity`] uses the EMA weights.
    pub fn use_ema(&self) -> bool {
        self.use_ema
    }

    pub fn set_use_ema(&mut self, on: bool) {
        self.use_ema = on;
    }

    /// `ema <- decay * ema + (1 - decay) * params`.
    pub fn update_ema(&mut self, decay: f64) {
        self.ema.ema_update(&self.params, decay);
    }

    /// Adds Gaussian noise of standard deviation `std` to every parameter
    /// (and copies the result into the EMA weights). Used to test the network
    /// away from its identity-like initialization.
    pub fn perturb(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in self.params.tensors_mut() {
            let noise = normal(&mut rng, t.shape(), std);
            t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
        }
        self.ema = self.params.clone();
    }

    fn dims(&self, t: usize, s: usize) -> Dims {
        Dims { t, b: self.cfg.n_bands, s, o: self.cfg.embed_dim, heads: self.cfg.n_heads, groups: self.cfg.norm_groups }
    }

    fn encode(&self, xin: &Stack, cond: &[f64]) -> Result<Encoded> {
        let (k, l) = (xin.k(), xin.l());
        if cond.len() != l {
            return Err(Error::shape(format!("input has {l} samples, conditioning {}", cond.len())));
        }
        let t = self.stft.n_frames(l);
        let (b, o, s, f) = (self.cfg.n_bands, self.cfg.embed_dim, k + 1, self.stft.n_bins());
        let mut feats = vec![0.0; t * b * s * o];
        let mut spec_in = Vec::with_capacity(k * t * f * 2);
        let mut spec_mix = Vec::new();
        for si in 0..s {
            let row = if si < k { xin.row(si) } else { cond };
            let spec = self.stft.stft(row)?;
            let tok = self.split.split(&crate::dsp::compress(&spec.data), t)?;
            for (ti, chunk) in tok.chunks_exact(b * o).enumerate() {
                for bi in 0..b {
                    let dst = ((ti * b + bi) * s + si) * o;
                    feats[dst..dst + o].copy_from_slice(&chunk[bi * o..(bi + 1) * o]);
                }
            }
            if si < k {
                spec_in.extend_from_slice(&spec.data);
            } else {
                spec_mix = spec.data;
            }
        }
        let mix_std = global_norm(&mut feats, [t, b, s, o])[k].std;
        let mix_rep: Vec<f64> = (0..k).flat_map(|_| spec_mix.iter().copied()).collect();
        Ok(Encoded {
            t,
            feats: Tensor::new(vec![t, b, s, o], feats)?,
            mix_std,
            spec_in: Tensor::new(vec![k, t, f, 2], spec_in)?,
            spec_mix: Tensor::new(vec![k, t, f, 2], mix_rep)?,
        })
    }

    /// Per-norm scale and shift rows `[M, O]` on the tape.
    fn time_mods(&self, tape: &mut Tape, bound: &Bound, t: f64) -> Result<Var> {
        let e = self.cfg.time_embed_dim;
        let emb = tape.constant(Tensor::new(vec![1, e], time_embedding(t, e))?);
        let h = tape.linear(emb, bound.var(self.ids.t_w1))?;
        let hs = tape.shape(h).to_vec();
        let b1 = tape.expand(bound.var(self.ids.t_b1), &hs, &[1])?;
        let h = tape.add(h, b1)?;
        let h = tape.swish(h);
        let m = tape.linear(h, bound.var(self.ids.t_w2))?;
        let ms = tape.shape(m).to_vec();
        let b2 = tape.expand(bound.var(self.ids.t_b2), &ms, &[1])?;
        let m = tape.add(m, b2)?;
        tape.reshape(m, &[self.cfg.n_mod_rows(), self.cfg.embed_dim])
    }

    fn mod_row(&self, tape: &mut Tape, mods: Var, i: usize) -> Result<Var> {
        let r = tape.slice(mods, 0, i, 1)?;
        tape.reshape(r, &[self.cfg.embed_dim])
    }

    /// Per-norm modulation vectors for time `t` (`[M * O]`, rows ordered
    /// scale, shift per norm) under the training weights.
    pub fn condition_time(&self, t: f64) -> Result<Vec<f64>> {
        check_time(t)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let m = self.time_mods(&mut tape, &bound, t)?;
        Ok(tape.value(m).data().to_vec())
    }

    /// Token grid after the encoder embedding, `[T, B, S, O]`.
    fn embed(&self, tape: &mut Tape, bound: &Bound, enc: &Encoded) -> Result<Var> {
        let x = tape.constant(enc.feats.clone());
        let h = tape.linear(x, bound.var(self.ids.enc_proj))?;
        let shape = tape.shape(h).to_vec();
        let band = tape.expand(bound.var(self.ids.band_emb), &shape, &[1, 3])?;
        tape.add(h, band)
    }

    /// Adds the marker vector to the mixture token (last on the source axis).
    fn mark_mixture(&self, tape: &mut Tape, bound: &Bound, h: Var, d: Dims) -> Result<Var> {
        let shape = [d.t, d.b, d.s, d.o];
        let m = tape.expand(bound.var(self.ids.marker), &shape, &[3])?;
        let mut mask = Tensor::zeros(&shape);
        for (i, v) in mask.data_mut().chunks_exact_mut(d.o).enumerate() {
            if i % d.s == d.s - 1 {
                v.fill(1.0);
            }
        }
        let mask = tape.constant(mask);
        let m = tape.mul(m, mask)?;
        tape.add(h, m)
    }

    fn run_block(&self, tape: &mut Tape, bound: &Bound, mods: Var, i: usize, h: Var, d: Dims) -> Result<Var> {
        let h = self.mark_mixture(tape, bound, h, d)?;
        let mut rows = [h; 4];
        for (j, r) in rows.iter_mut().enumerate() {
            *r = self.mod_row(tape, mods, 4 * i + j)?;
        }
        let out = block_forward(tape, bound, &self.ids.blocks[i], d, h, rows)?;
        if !tape.value(out).is_finite() {
            return Err(Error::NonFinite(format!("activations after block {i} ({:?})", self.ids.blocks[i].kind)));
        }
        Ok(out)
    }

    /// Decoder: drop the mixture token, project to three heads, unsplit and
    /// combine with the hybrid mask, then synthesize and center the waveforms.
    fn decode(&self, tape: &mut Tape, bound: &Bound, mods: Var, h: Var, enc: &Encoded, k: usize, l: usize) -> Result<Var> {
        let d = self.dims(enc.t, k + 1);
        let n_norms = 2 * self.cfg.n_layers();
        let n = tape.rms_group_norm(h, bound.var(self.ids.final_norm), d.groups, NORM_EPS)?;
        let sc = self.mod_row(tape, mods, 2 * n_norms)?;
        let sh = self.mod_row(tape, mods, 2 * n_norms + 1)?;
        let n = blocks::modulate(tape, n, sc, sh)?;
        let u = tape.slice(n, 2, 0, k)?;
        let u = tape.linear(u, bound.var(self.ids.decoder))?;
        let (t, b, o) = (d.t, d.b, d.o);
        let u = tape.reshape(u, &[t, b, k, 3, o])?;
        let u = tape.permute(u, &[3, 2, 0, 1, 4])?;
        let u = tape.reshape(u, &[3, k, t, b * o])?;
        let u = tape.apply(u, Arc::new(BandUnsplit { split: self.split.clone() }))?;
        let f = self.stft.n_bins();
        let mut heads = [u; 3];
        for (i, hd) in heads.iter_mut().enumerate() {
            let s = tape.slice(u, 0, i, 1)?;
            *hd = tape.reshape(s, &[k, t, f, 2])?;
        }
        let [map, m_in, m_mix] = heads;
        let map = tape.scale(map, enc.mix_std);
        let map = tape.mag_pow(map, 1.0 / COMPRESS_EXPONENT)?;
        let mut offset = Tensor::zeros(&[k, t, f, 2]);
        offset.data_mut().iter_mut().step_by(2).for_each(|v| *v = -1.0);
        let offset = tape.constant(offset);
        let m_in = tape.add(m_in, offset)?;
        let x_in = tape.constant(enc.spec_in.clone());
        let x_mix = tape.constant(enc.spec_mix.clone());
        let spec = hybrid_mask_tape(tape, map, m_in, x_in, m_mix, x_mix)?;
        let spec = tape.reshape(spec, &[k, t, 2 * f])?;
        let frames = tape.apply(spec, Arc::new(FrameSynth { dft: self.stft.dft().clone() }))?;
        let frames = tape.reshape(frames, &[k, t * self.stft.frame_len])?;
        let y = tape.apply(frames, Arc::new(OverlapAdd::for_signal(&self.stft, l)))?;
        let mean = tape.mean_axis(y, 0)?;
        let mean = tape.expand(mean, &[k, l], &[1])?;
        tape.sub(y, mean)
    }

    /// Builds the forward graph on `tape` with the parameters in `bound`;
    /// returns the centered `[K, L]` output.
    pub fn forward_tape(&self, tape: &mut Tape, bound: &Bound, t: f64, xin: &Stack, cond: &[f64]) -> Result<Var> {
        check_time(t)?;
        let (k, l) = (xin.k(), xin.l());
        if k < 2 {
            return Err(Error::invalid(format!("need at least two sources, got {k}")));
        }
        if l < self.stft.frame_len {
            return Err(Error::invalid(format!("signal of {l} samples is shorter than one frame")));
        }
        let enc = self.encode(xin, cond)?;
        let d = self.dims(enc.t, k + 1);
        let mods = self.time_mods(tape, bound, t)?;
        let mut h = self.embed(tape, bound, &enc)?;
        for i in 0..self.ids.blocks.len() {
            h = self.run_block(tape, bound, mods, i, h, d)?;
        }
        self.decode(tape, bound, mods, h, &enc, k, l)
    }

    /// Forward pass with the given weights, no gradients.
    pub fn forward_with(&self, store: &ParamStore, t: f64, xin: &Stack, cond: &[f64]) -> Result<Stack> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let y = self.forward_tape(&mut tape, &bound, t, xin, cond)?;
        let out = Stack::new(xin.k(), xin.l(), tape.value(y).data().to_vec())?;
        if !out.is_finite() {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(out)
    }

    /// Forward pass with the inference weights (EMA unless disabled).
    pub fn forward(&self, t: f64, xin: &Stack, cond: &[f64]) -> Result<Stack> {
        self.forward_with(if self.use_ema { &self.ema } else { &self.params }, t, xin, cond)
    }

    pub fn n_layers(&self) -> usize {
        self.ids.blocks.len()
    }

    /// Finite-difference check of one block in isolation: gradients of a
    /// fixed random contraction of the block output with respect to the
    /// block input, every parameter and the time conditioning.
    pub fn grad_check_block(&self, layer: usize, k: usize, frames: usize, seed: u64, max_coords: usize) -> Result<GradCheckReport> {
        if layer >= self.n_layers() {
            return Err(Error::invalid(format!("no block {layer}")));
        }
        let d = self.dims(frames, k + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h0 = normal(&mut rng, &[d.t, d.b, d.s, d.o], 1.0);
        let w = normal(&mut rng, &[d.t, d.b, d.s, d.o], 1.0);
        let mut inputs = vec![h0];
        inputs.extend(self.params.tensors().iter().cloned());
        grad_check(
            &inputs,
            |tape, vars| {
                let bound = Bound::from_vars(vars[1..].to_vec());
                let mods = self.time_mods(tape, &bound, 0.3)?;
                let y = self.run_block(tape, &bound, mods, layer, vars[0], d)?;
                let w = tape.constant(w.clone());
                let p = tape.mul(y, w)?;
                Ok(tape.sum_all(p))
            },
            1e-5,
            1e-6,
            max_coords,
        )
    }
}

impl VelocityField for VelocityModel {
    fn velocity(&self, t: f64, xin: &Stack, cond: &[f64]) -> Result<Stack> {
        self.forward(t, xin, cond)
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
