//! MADUN: a memory-augmented deep unfolding network for compressive sensing,
//! built on a small from-scratch tensor/autodiff engine.
//!
//! Layering, bottom up:
//! - [`tensor`], [`scalar`], [`conv`], [`tape`], [`gradcheck`]: dense tensors
//!   and reverse-mode autodiff.
//! - [`dft`], [`cs`]: measurement operators (orthonormal Gaussian, masked
//!   Fourier) and image blocking.
//! - [`model`]: the unfolded K-stage network and its ablation variants.
//! - [`trainer`], [`checkpoint`]: Adam training loop and persistence.
//! - [`metrics`], [`analysis`]: PSNR/SSIM evaluation and memory-feature
//!   analysis instruments.
//! - [`pgm`], [`config`], [`cli`]: I/O and the command-line front end.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod conv;
pub mod cs;
pub mod dft;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod pgm;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
