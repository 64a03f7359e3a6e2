//! STFT front end: framing, magnitude compression, Mel band split and global
//! normalization.
//!
//! Spectrograms are stored interleaved as `[T][F][re, im]` in a flat `Vec<f64>`.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};

use crate::error::{Error, Result};

/// Magnitude compression exponent.
pub const COMPRESS_EXPONENT: f64 = 0.33;

/// Real-input DFT of a fixed frame length, with its inverse and adjoints.
#[derive(Clone)]
pub struct FrameDft {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FrameDft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FrameDft({})", self.n)
    }
}

impl FrameDft {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { n, fwd: planner.plan_fft_forward(n), inv: planner.plan_fft_inverse(n) }
    }

    pub fn frame_len(&self) -> usize {
        self.n
    }

    /// Number of one-sided bins, `N/2 + 1`.
    pub fn n_bins(&self) -> usize {
        self.n / 2 + 1
    }

    /// One-sided spectrum of a real frame, written interleaved into `out`.
    pub fn forward(&self, frame: &[f64], out: &mut [f64]) {
        let mut buf: Vec<Complex<f64>> = frame.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fwd.process(&mut buf);
        for (k, c) in buf[..self.n_bins()].iter().enumerate() {
            out[2 * k] = c.re;
            out[2 * k + 1] = c.im;
        }
    }

    /// Weight of bin `k` in the one-sided inverse.
    fn bin_weight(&self, k: usize) -> f64 {
        if k == 0 || (self.n % 2 == 0 && k == self.n / 2) {
            1.0
        } else {
            2.0
        }
    }

    /// Real frame from a one-sided spectrum:
    /// `x[n] = 1/N sum_k c_k Re(X_k e^{2 pi i k n / N})`. The imaginary parts of
    /// the DC and Nyquist bins do not contribute.
    pub fn inverse(&self, spec: &[f64], out: &mut [f64]) {
        let n = self.n;
        let nb = self.n_bins();
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for k in 0..nb {
            let c = Complex::new(spec[2 * k], spec[2 * k + 1]);
            if self.bin_weight(k) == 1.0 {
                buf[k] = Complex::new(c.re, 0.0);
            } else {
                buf[k] = c;
                buf[n - k] = c.conj();
            }
        }
        self.inv.process(&mut buf);
        let scale = 1.0 / n as f64;
        for (o, c) in out.iter_mut().zip(&buf) {
            *o = c.re * scale;
        }
    }

    /// Adjoint of [`FrameDft::inverse`]: maps a gradient on the frame to a
    /// gradient on the interleaved spectrum.
    pub fn inverse_adjoint(&self, grad_frame: &[f64], out: &mut [f64]) {
        let mut buf: Vec<Complex<f64>> =
            grad_frame.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fwd.process(&mut buf);
        let scale = 1.0 / self.n as f64;
        for k in 0..self.n_bins() {
            let w = self.bin_weight(k) * scale;
            out[2 * k] = w * buf[k].re;
            // DC and Nyquist imaginary parts are ignored by the inverse
            out[2 * k + 1] = if self.bin_weight(k) == 1.0 { 0.0 } else { w * buf[k].im };
        }
    }
}

/// STFT geometry: frame length, hop and analysis window.
#[derive(Clone, Debug)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub hop: usize,
    window: Vec<f64>,
    dft: FrameDft,
}

impl StftConfig {
    /// 20 ms frames with half overlap.
    pub fn for_sample_rate(sample_rate: u32) -> Result<Self> {
        let frame_len = (sample_rate as f64 * 0.02).round() as usize;
        Self::with_frame_len(sample_rate, frame_len)
    }

    pub fn with_frame_len(sample_rate: u32, frame_len: usize) -> Result<Self> {
        if frame_len < 4 || frame_len % 2 != 0 {
            return Err(Error::Config(format!("frame length must be even and >= 4, got {frame_len}")));
        }
        // periodic Hamming, scaled so that half-overlapped copies sum to one
        let window = (0..frame_len)
            .map(|n| (0.54 - 0.46 * (2.0 * PI * n as f64 / frame_len as f64).cos()) / 1.08)
            .collect();
        Ok(Self { sample_rate, frame_len, hop: frame_len / 2, window, dft: FrameDft::new(frame_len) })
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn dft(&self) -> &FrameDft {
        &self.dft
    }

    pub fn n_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Frames needed so every sample of a length-`len` signal lies in two frames.
    pub fn n_frames(&self, len: usize) -> usize {
        (self.hop + len - 1) / self.hop + 1
    }

    /// Offset of the first signal sample in the padded frame grid.
    pub fn pad(&self) -> usize {
        self.frame_len / 2
    }

    pub fn stft(&self, x: &[f64]) -> Result<Spectrogram> {
        if x.len() < self.frame_len {
            return Err(Error::invalid(format!(
                "signal of {} samples shorter than one frame ({})",
                x.len(),
                self.frame_len
            )));
        }
        let t = self.n_frames(x.len());
        let f = self.n_bins();
        let pad = self.pad();
        let mut data = vec![0.0; t * f * 2];
        let mut frame = vec![0.0; self.frame_len];
        for m in 0..t {
            let start = m * self.hop;
            for (n, v) in frame.iter_mut().enumerate() {
                let idx = (start + n) as isize - pad as isize;
                *v = if idx >= 0 && (idx as usize) < x.len() {
                    x[idx as usize] * self.window[n]
                } else {
                    0.0
                };
            }
            self.dft.forward(&frame, &mut data[m * f * 2..(m + 1) * f * 2]);
        }
        Ok(Spectrogram { frames: t, bins: f, data })
    }

    /// Inverse DFT per frame followed by plain overlap-add, cropped to `len`.
    pub fn istft(&self, spec: &Spectrogram, len: usize) -> Result<Vec<f64>> {
        if spec.bins != self.n_bins() || spec.frames != self.n_frames(len) {
            return Err(Error::shape(format!(
                "spectrogram {}x{} does not fit a {len}-sample signal ({}x{})",
                spec.frames,
                spec.bins,
                self.n_frames(len),
                self.n_bins()
            )));
        }
        let mut frame = vec![0.0; self.frame_len];
        let mut out = vec![0.0; len];
        let pad = self.pad();
        for m in 0..spec.frames {
            self.dft.inverse(spec.frame(m), &mut frame);
            overlap_add_frame(&frame, m * self.hop, pad, &mut out);
        }
        Ok(out)
    }
}

/// Adds `frame` placed at padded position `start` into the cropped output.
pub(crate) fn overlap_add_frame(frame: &[f64], start: usize, pad: usize, out: &mut [f64]) {
    for (n, v) in frame.iter().enumerate() {
        let idx = (start + n) as isize - pad as isize;
        if idx >= 0 && (idx as usize) < out.len() {
            out[idx as usize] += v;
        }
    }
}

/// Interleaved complex spectrogram, `[T][F][re, im]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl Spectrogram {
    pub fn frame(&self, m: usize) -> &[f64] {
        &self.data[m * self.bins * 2..(m + 1) * self.bins * 2]
    }

    pub fn bin(&self, m: usize, k: usize) -> Complex<f64> {
        let i = (m * self.bins + k) * 2;
        Complex::new(self.data[i], self.data[i + 1])
    }
}

/// Element-wise `|z|^p e^{i arg z}` on interleaved complex values.
pub fn magnitude_power(data: &[f64], p: f64) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (o, z) in out.chunks_exact_mut(2).zip(data.chunks_exact(2)) {
        let m2 = z[0] * z[0] + z[1] * z[1];
        if m2 > 0.0 {
            let g = m2.powf(0.5 * (p - 1.0));
            o[0] = z[0] * g;
            o[1] = z[1] * g;
        }
    }
    out
}

pub fn compress(data: &[f64]) -> Vec<f64> {
    magnitude_power(data, COMPRESS_EXPONENT)
}

pub fn decompress(data: &[f64]) -> Vec<f64> {
    magnitude_power(data, 1.0 / COMPRESS_EXPONENT)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Partition of STFT bins into Mel-spaced bands with a fixed per-band
/// projection to `embed_dim` features.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSplit {
    /// `n_bands + 1` monotone bin edges; band `b` covers `edges[b]..edges[b+1]`.
    pub edges: Vec<usize>,
    pub embed_dim: usize,
    /// Per band, an `embed_dim x 2 n_b` row-major matrix.
    pub weights: Vec<Vec<f64>>,
}

impl MelSplit {
    /// Mel-spaced bands over `n_bins` bins of a `sample_rate` STFT. The
    /// projections start from a triangular Mel weighting and are completed to
    /// an orthonormal set, so unsplitting is exact whenever
    /// `embed_dim >= 2 * widest band`.
    pub fn new(
        sample_rate: u32,
        n_bins: usize,
        n_bands: usize,
        embed_dim: usize,
        require_exact: bool,
    ) -> Result<Self> {
        if n_bands == 0 || n_bands > n_bins {
            return Err(Error::Config(format!("cannot split {n_bins} bins into {n_bands} bands")));
        }
        let edges = mel_edges(sample_rate, n_bins, n_bands);
        let widest = edges.windows(2).map(|w| w[1] - w[0]).max().unwrap();
        if require_exact && embed_dim < 2 * widest {
            return Err(Error::Config(format!(
                "embedding of {embed_dim} cannot invert a band of {widest} bins ({} values)",
                2 * widest
            )));
        }
        let weights =
            edges.windows(2).map(|w| band_projection(w[1] - w[0], embed_dim)).collect();
        Ok(Self { edges, embed_dim, weights })
    }

    /// Custom bands and projections (each `embed_dim x 2 n_b`).
    pub fn from_parts(edges: Vec<usize>, embed_dim: usize, weights: Vec<Vec<f64>>) -> Result<Self> {
        if edges.len() < 2 || edges[0] != 0 || edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("band edges {edges:?} are not a partition")));
        }
        if weights.len() != edges.len() - 1 {
            return Err(Error::shape("one projection per band required"));
        }
        for (b, w) in weights.iter().enumerate() {
            let nb = edges[b + 1] - edges[b];
            if w.len() != embed_dim * 2 * nb {
                return Err(Error::shape(format!(
                    "band {b}: projection has {} values, expected {}",
                    w.len(),
                    embed_dim * 2 * nb
                )));
            }
        }
        Ok(Self { edges, embed_dim, weights })
    }

    pub fn n_bands(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn n_bins(&self) -> usize {
        *self.edges.last().unwrap()
    }

    /// `[T][F][2]` to `[T][B][O]`.
    pub fn split(&self, spec: &[f64], frames: usize) -> Result<Vec<f64>> {
        let f = self.n_bins();
        if spec.len() != frames * f * 2 {
            return Err(Error::shape(format!(
                "spectrogram has {} values, expected {frames}x{f}x2",
                spec.len()
            )));
        }
        let (nb, o) = (self.n_bands(), self.embed_dim);
        let mut out = vec![0.0; frames * nb * o];
        for m in 0..frames {
            let frame = &spec[m * f * 2..(m + 1) * f * 2];
            for b in 0..nb {
                let seg = &frame[2 * self.edges[b]..2 * self.edges[b + 1]];
                let w = &self.weights[b];
                let d = seg.len();
                let dst = &mut out[(m * nb + b) * o..(m * nb + b + 1) * o];
                for (i, y) in dst.iter_mut().enumerate() {
                    *y = w[i * d..(i + 1) * d].iter().zip(seg).map(|(a, x)| a * x).sum();
                }
            }
        }
        Ok(out)
    }

    /// `[T][B][O]` back to `[T][F][2]` with the transposed projections.
    pub fn unsplit(&self, feats: &[f64], frames: usize) -> Result<Vec<f64>> {
        let (nb, o, f) = (self.n_bands(), self.embed_dim, self.n_bins());
        if feats.len() != frames * nb * o {
            return Err(Error::shape(format!(
                "features have {} values, expected {frames}x{nb}x{o}",
                feats.len()
            )));
        }
        let mut out = vec![0.0; frames * f * 2];
        for m in 0..frames {
            for b in 0..nb {
                self.unsplit_band(b, &feats[(m * nb + b) * o..(m * nb + b + 1) * o], {
                    let lo = m * f * 2 + 2 * self.edges[b];
                    let hi = m * f * 2 + 2 * self.edges[b + 1];
                    &mut out[lo..hi]
                });
            }
        }
        Ok(out)
    }

    /// `dst += W_b^T feat` for one band.
    pub(crate) fn unsplit_band(&self, b: usize, feat: &[f64], dst: &mut [f64]) {
        let w = &self.weights[b];
        let d = dst.len();
        for (i, &y) in feat.iter().enumerate() {
            if y != 0.0 {
                for (o, a) in dst.iter_mut().zip(&w[i * d..(i + 1) * d]) {
                    *o += a * y;
                }
            }
        }
    }

    /// `dst += W_b seg`, the adjoint of [`MelSplit::unsplit_band`].
    pub(crate) fn split_band(&self, b: usize, seg: &[f64], dst: &mut [f64]) {
        let w = &self.weights[b];
        let d = seg.len();
        for (i, y) in dst.iter_mut().enumerate() {
            *y += w[i * d..(i + 1) * d].iter().zip(seg).map(|(a, x)| a * x).sum::<f64>();
        }
    }
}

/// Mel-spaced bin edges, forced strictly increasing so every band is non-empty.
fn mel_edges(sample_rate: u32, n_bins: usize, n_bands: usize) -> Vec<usize> {
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let bin_hz = nyquist / (n_bins - 1) as f64;
    let mut edges: Vec<usize> = (0..=n_bands)
        .map(|i| {
            let hz = mel_to_hz(top * i as f64 / n_bands as f64);
            (hz / bin_hz).round() as usize
        })
        .collect();
    edges[0] = 0;
    edges[n_bands] = n_bins;
    for i in 1..=n_bands {
        edges[i] = edges[i].max(edges[i - 1] + 1);
    }
    for i in (0..n_bands).rev() {
        edges[i] = edges[i].min(edges[i + 1] - 1);
    }
    edges
}

/// Orthonormal rows for a band of `nb` bins: triangular weights on the real and
/// imaginary parts first, then cosine shapes, then the canonical basis.
fn band_projection(nb: usize, embed_dim: usize) -> Vec<f64> {
    let d = 2 * nb;
    let tri: Vec<f64> = (0..nb)
        .map(|j| {
            let c = (nb as f64 - 1.0) / 2.0;
            1.0 - (j as f64 - c).abs() / (c + 1.0)
        })
        .collect();
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    let interleave = |shape: &[f64], part: usize| {
        let mut v = vec![0.0; d];
        for (j, s) in shape.iter().enumerate() {
            v[2 * j + part] = *s;
        }
        v
    };
    candidates.push(interleave(&tri, 0));
    candidates.push(interleave(&tri, 1));
    for m in 0..nb {
        let shape: Vec<f64> =
            (0..nb).map(|j| (PI * m as f64 * (j as f64 + 0.5) / nb as f64).cos()).collect();
        candidates.push(interleave(&shape, 0));
        candidates.push(interleave(&shape, 1));
    }
    for i in 0..d {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        candidates.push(e);
    }

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    for mut v in candidates {
        if basis.len() == d.min(embed_dim) {
            break;
        }
        for _ in 0..2 {
            for u in &basis {
                let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut w = vec![0.0; embed_dim * d];
    for (i, row) in basis.iter().enumerate() {
        w[i * d..(i + 1) * d].copy_from_slice(row);
    }
    w
}

/// Mean and standard deviation removed from one source by [`global_norm`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// Normalizes features laid out `[T][B][S][O]` to zero mean and unit standard
/// deviation, separately per source `s`. A standard deviation below `1e-8` is
/// replaced by one.
pub fn global_norm(feats: &mut [f64], dims: [usize; 4]) -> Vec<NormStats> {
    let [t, b, s, o] = dims;
    assert_eq!(feats.len(), t * b * s * o);
    let count = (t * b * o) as f64;
    let mut sums = vec![0.0; s];
    for (i, chunk) in feats.chunks_exact(o).enumerate() {
        sums[i % s] += chunk.iter().sum::<f64>();
    }
    let means: Vec<f64> = sums.iter().map(|v| v / count).collect();
    let mut sq = vec![0.0; s];
    for (i, chunk) in feats.chunks_exact(o).enumerate() {
        let m = means[i % s];
        sq[i % s] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    let stats: Vec<NormStats> = means
        .iter()
        .zip(&sq)
        .map(|(&mean, &q)| {
            let std = (q / count).sqrt();
            NormStats { mean, std: if std < 1e-8 { 1.0 } else { std } }
        })
        .collect();
    for (i, chunk) in feats.chunks_exact_mut(o).enumerate() {
        let st = stats[i % s];
        chunk.iter_mut().for_each(|v| *v = (*v - st.mean) / st.std);
    }
    stats
}

/// The fixed encoder chain `band_split(compress(stft(x)))` and its inverse.
#[derive(Clone, Debug)]
pub struct Codec {
    pub stft: StftConfig,
    pub split: MelSplit,
}

impl Codec {
    pub fn new(stft: StftConfig, n_bands: usize, embed_dim: usize, require_exact: bool) -> Result<Self> {
        let split = MelSplit::new(stft.sample_rate, stft.n_bins(), n_bands, embed_dim, require_exact)?;
        Ok(Self { stft, split })
    }

    /// Returns `[T][B][O]` features and the frame count.
    pub fn encode(&self, x: &[f64]) -> Result<(Vec<f64>, usize)> {
        let spec = self.stft.stft(x)?;
        let feats = self.split.split(&compress(&spec.data), spec.frames)?;
        Ok((feats, spec.frames))
    }

    pub fn decode(&self, feats: &[f64], frames: usize, len: usize) -> Result<Vec<f64>> {
        let spec = decompress(&self.split.unsplit(feats, frames)?);
        self.stft.istft(&Spectrogram { frames, bins: self.stft.n_bins(), data: spec }, len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    fn noise(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn window_overlap_adds_to_one() {
        let cfg = StftConfig::for_sample_rate(16_000).unwrap();
        assert_eq!(cfg.frame_len, 320);
        assert_eq!(cfg.hop, 160);
        for n in 0..cfg.hop {
            let s = cfg.window()[n] + cfg.window()[n + cfg.hop];
            assert!((s - 1.0).abs() < 1e-15);
        }
        assert_eq!(StftConfig::for_sample_rate(24_000).unwrap().frame_len, 480);
    }

    #[test]
    fn zero_signal_has_zero_spectrum() {
        let cfg = StftConfig::for_sample_rate(16_000).unwrap();
        let spec = cfg.stft(&vec![0.0; 1000]).unwrap();
        assert!(spec.data.iter().all(|&v| v == 0.0));
        assert!(cfg.stft(&[0.0; 100]).is_err());
    }

    #[test]
    fn sinusoid_at_bin_center_peaks_there() {
        let cfg = StftConfig::for_sample_rate(16_000).unwrap();
        let bin = 20;
        let f = bin as f64 * 16_000.0 / 320.0;
        let x: Vec<f64> = (0..4000).map(|n| (2.0 * PI * f * n as f64 / 16_000.0).sin()).collect();
        let spec = cfg.stft(&x).unwrap();
        // interior frames only; edge frames see zero padding
        for m in 2..spec.frames - 2 {
            let mags: Vec<f64> = (0..spec.bins).map(|k| spec.bin(m, k).norm()).collect();
            let peak = (0..spec.bins).max_by(|&a, &b| mags[a].total_cmp(&mags[b])).unwrap();
            assert_eq!(peak, bin);
            // windowed sinusoid: peak magnitude = N/2 * mean(window) = 160 / 1.08 * 0.54
            assert!((mags[bin] - 80.0).abs() < 1e-9 * 80.0, "{}", mags[bin]);
            let total: f64 = mags.iter().map(|m| m * m).sum();
            let near: f64 = mags[bin - 1..=bin + 1].iter().map(|m| m * m).sum();
            assert!(near / total > 0.999);
        }
    }

    #[test]
    fn stft_round_trip() {
        let cfg = StftConfig::for_sample_rate(16_000).unwrap();
        for &len in &[320usize, 1000, 8000, 16_000] {
            let x = noise(len as u64, len);
            let back = cfg.istft(&cfg.stft(&x).unwrap(), len).unwrap();
            assert!(rel_err(&back, &x) <= 1e-6);
        }
    }

    #[test]
    fn frame_dft_inverse_adjoint_is_consistent() {
        let dft = FrameDft::new(16);
        let spec = noise(1, 18);
        let g = noise(2, 16);
        let mut frame = vec![0.0; 16];
        dft.inverse(&spec, &mut frame);
        let lhs: f64 = frame.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut adj = vec![0.0; 18];
        dft.inverse_adjoint(&g, &mut adj);
        let rhs: f64 = adj.iter().zip(&spec).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn compression_examples() {
        assert_eq!(compress(&[0.0, 0.0]), vec![0.0, 0.0]);
        let c = compress(&[8.0, 0.0]);
        assert!((c[0] - 8f64.powf(0.33)).abs() < 1e-15);
        assert!((c[0] - 1.98618).abs() < 1e-4);
        assert_eq!(c[1], 0.0);
        let z = noise(3, 64);
        let back = decompress(&compress(&z));
        assert!(rel_err(&back, &z) <= 1e-6);
        // phase is kept
        let c = compress(&[-3.0, 4.0]);
        assert!((c[1].atan2(c[0]) - 4f64.atan2(-3.0)).abs() < 1e-12);
    }

    #[test]
    fn mel_bands_cover_all_bins() {
        for &(sr, bands) in &[(16_000u32, 16usize), (16_000, 80), (24_000, 80), (16_000, 4)] {
            let cfg = StftConfig::for_sample_rate(sr).unwrap();
            let split = MelSplit::new(sr, cfg.n_bins(), bands, 8, false).unwrap();
            assert_eq!(split.edges.len(), bands + 1);
            assert_eq!(split.edges[0], 0);
            assert_eq!(*split.edges.last().unwrap(), cfg.n_bins());
            assert!(split.edges.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn band_split_examples() {
        let f = 161;
        let split = MelSplit::new(16_000, f, 16, 32, false).unwrap();
        assert!(split.split(&vec![0.0; 3 * f * 2], 3).unwrap().iter().all(|&v| v == 0.0));
        assert!(MelSplit::new(16_000, f, 16, 32, true).is_err());

        // one band with the identity projection is a reshape
        let n = 5;
        let mut eye = vec![0.0; 4 * n * n];
        for i in 0..2 * n {
            eye[i * 2 * n + i] = 1.0;
        }
        let single = MelSplit::from_parts(vec![0, n], 2 * n, vec![eye]).unwrap();
        let spec = noise(4, 3 * n * 2);
        assert_eq!(single.split(&spec, 3).unwrap(), spec);
    }

    #[test]
    fn orthonormal_split_inverts() {
        let cfg = StftConfig::for_sample_rate(16_000).unwrap();
        let split = MelSplit::new(16_000, cfg.n_bins(), 80, 192, true).unwrap();
        let spec = noise(5, 7 * cfg.n_bins() * 2);
        let feats = split.split(&spec, 7).unwrap();
        let back = split.unsplit(&feats, 7).unwrap();
        assert!(rel_err(&back, &spec) <= 1e-6);
    }

    #[test]
    fn global_norm_examples() {
        let dims = [4, 3, 2, 5];
        let mut flat = vec![0.7; 120];
        global_norm(&mut flat, dims);
        assert!(flat.iter().all(|&v| v == 0.0));

        let mut feats = noise(6, 120);
        feats.iter_mut().enumerate().for_each(|(i, v)| *v = *v * (1.0 + (i / 5 % 2) as f64) + 3.0);
        let orig = feats.clone();
        global_norm(&mut feats, dims);
        for s in 0..2 {
            let vals: Vec<f64> =
                feats.chunks_exact(5).enumerate().filter(|(i, _)| i % 2 == s).flat_map(|(_, c)| c.to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6 && (var.sqrt() - 1.0).abs() < 1e-6);
        }

        // swapping the two sources swaps the normalized outputs
        let mut swapped: Vec<f64> = orig
            .chunks_exact(10)
            .flat_map(|c| c[5..].iter().chain(&c[..5]).copied().collect::<Vec<_>>())
            .collect();
        global_norm(&mut swapped, dims);
        let reswapped: Vec<f64> = swapped
            .chunks_exact(10)
            .flat_map(|c| c[5..].iter().chain(&c[..5]).copied().collect::<Vec<_>>())
            .collect();
        assert!(rel_err(&reswapped, &feats) < 1e-14);
    }

    #[test]
    fn codec_round_trip_one_second() {
        let cfg = StftConfig::for_sample_rate(16_000).unwrap();
        let codec = Codec::new(cfg, 80, 192, true).unwrap();
        let x = noise(7, 16_000);
        let (feats, frames) = codec.encode(&x).unwrap();
        let back = codec.decode(&feats, frames, x.len()).unwrap();
        assert!(rel_err(&back, &x) <= 1e-5);
    }
}
