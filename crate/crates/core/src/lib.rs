//! Mixture-consistent flow matching for single-channel source separation.
//!
//! The crate covers the source geometry ([`geometry`]), the conditional flow
//! path ([`flowpath`]), permutation handling ([`assignment`]), the training
//! losses ([`losses`]), mixture-driven noise shaping ([`noiseshape`]), the
//! STFT/Mel front end ([`dsp`]), a small reverse-mode autodiff engine
//! ([`tensor`]), the permutation-equivariant velocity network ([`eqnet`]), the
//! Euler sampler ([`sampler`]), data/training/evaluation ([`pipeline`]) and
//! SI-SDR scoring ([`metrics`]).

pub mod assignment;
pub mod cli;
pub mod config;
pub mod dsp;
pub mod eqnet;
pub mod error;
pub mod flowpath;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod noiseshape;
pub mod pipeline;
pub mod sampler;
pub mod tensor;
pub mod wav;

pub use error::{Error, Result};
