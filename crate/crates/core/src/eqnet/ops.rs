//! Fixed linear maps used by the decoder, wrapped as tape operators.

use std::sync::Arc;

use crate::dsp::{overlap_add_frame, FrameDft, MelSplit, StftConfig};
use crate::tensor::LinearOperator;

/// `[B * O]` band features of one frame to the interleaved `[F][2]` spectrum.
pub(crate) struct BandUnsplit {
    pub split: Arc<MelSplit>,
}

impl LinearOperator for BandUnsplit {
    fn in_len(&self) -> usize {
        self.split.n_bands() * self.split.embed_dim
    }

    fn out_len(&self) -> usize {
        2 * self.split.n_bins()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let o = self.split.embed_dim;
        for b in 0..self.split.n_bands() {
            let (lo, hi) = (2 * self.split.edges[b], 2 * self.split.edges[b + 1]);
            self.split.unsplit_band(b, &x[b * o..(b + 1) * o], &mut y[lo..hi]);
        }
    }

    fn adjoint(&self, gy: &[f64], gx: &mut [f64]) {
        let o = self.split.embed_dim;
        for b in 0..self.split.n_bands() {
            let (lo, hi) = (2 * self.split.edges[b], 2 * self.split.edges[b + 1]);
            self.split.split_band(b, &gy[lo..hi], &mut gx[b * o..(b + 1) * o]);
        }
    }
}

/// One-sided spectrum of a frame to its real samples.
pub(crate) struct FrameSynth {
    pub dft: FrameDft,
}

impl LinearOperator for FrameSynth {
    fn in_len(&self) -> usize {
        2 * self.dft.n_bins()
    }

    fn out_len(&self) -> usize {
        self.dft.frame_len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.dft.inverse(x, y);
    }

    fn adjoint(&self, gy: &[f64], gx: &mut [f64]) {
        self.dft.inverse_adjoint(gy, gx);
    }
}

/// `T` concatenated frames to a cropped signal of `len` samples.
pub(crate) struct OverlapAdd {
    pub frames: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub pad: usize,
    pub len: usize,
}

impl OverlapAdd {
    pub fn for_signal(stft: &StftConfig, len: usize) -> Self {
        Self { frames: stft.n_frames(len), frame_len: stft.frame_len, hop: stft.hop, pad: stft.pad(), len }
    }
}

impl LinearOperator for OverlapAdd {
    fn in_len(&self) -> usize {
        self.frames * self.frame_len
    }

    fn out_len(&self) -> usize {
        self.len
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (m, frame) in x.chunks_exact(self.frame_len).enumerate() {
            overlap_add_frame(frame, m * self.hop, self.pad, y);
        }
    }

    fn adjoint(&self, gy: &[f64], gx: &mut [f64]) {
        for (m, frame) in gx.chunks_exact_mut(self.frame_len).enumerate() {
            for (n, g) in frame.iter_mut().enumerate() {
                let idx = (m * self.hop + n) as isize - self.pad as isize;
                if idx >= 0 && (idx as usize) < self.len {
                    *g = gy[idx as usize];
                }
            }
        }
    }
}
