//! Change detection on bi-temporal image pairs using features tapped from a
//! small denoising diffusion model, aligned with flow dual-alignment fusion
//! (FDAF) before a per-pixel change classifier.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: tensors, the portable RNG, the reverse-mode gradient
//!   engine, finite-difference checks, Adam, and the `CDT1` blob format.
//! * [`diffusion`]: noise schedule, forward noising, the noise-prediction
//!   objective, ancestral sampling, and feature extraction.
//! * [`denoiser`]: the time-conditioned U-Net with feature taps.
//! * [`fdaf`]: flow estimation, bilinear warping, and dual-alignment fusion.
//! * [`cdnet`]: change classifier, BCE loss, thresholding, and metrics.
//! * [`synthdata`]: deterministic synthetic scene pairs with nuisance factors.

pub mod cdnet;
pub mod denoiser;
pub mod diffusion;
mod error;
pub mod fdaf;
pub mod numerics;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
