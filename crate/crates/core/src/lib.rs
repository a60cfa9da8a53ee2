//! Joint search over diffusion timestep subsequences and per-layer
//! mixed-precision quantization policies for a small denoiser.
//!
//! The pipeline: train a toy ε-prediction network ([`nn`], [`diffusion`]),
//! calibrate a multi-precision quantizer bank once ([`quant`]), partition the
//! timesteps into groups ([`grouping`]), and run a BitOPs-constrained
//! evolutionary search ([`search`]) scored by Fréchet distance
//! ([`metrics`]) with costs from [`cost`].

pub mod cost;
pub mod diffusion;
pub mod error;
pub mod grouping;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod quant;
pub mod search;

pub use error::{Error, Result};
