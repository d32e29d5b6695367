//! Schrödinger-bridge diffusion denoising in the STFT domain with
//! EDM2-style preconditioning, magnitude-preserving networks, a
//! deterministic bridge sampler and post-hoc EMA reconstruction.

pub mod ema;
pub mod config;
pub mod error;
pub mod eval;
pub mod mpnet;
pub mod precond;
pub mod sampler;
pub mod schedule;
pub mod selftest;
pub mod signal;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
