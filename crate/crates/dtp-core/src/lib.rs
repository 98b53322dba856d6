//! Core library for the dual-path low-light super-resolution pipeline.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense tensors, an eager reverse-mode graph, parameter
//!   storage with checkpoints, and finite-difference gradient verification.
//! - [`fsd`]: learnable lifting-based frequency split with perfect
//!   reconstruction, subband reweighting, and the band-statistics prior.
//! - [`sdr`]: the luminance response curve and the texture denoising stack.
//! - [`csr`]: gated cross-branch fusion and the upsampling decoder.
//! - [`pipeline`]: the full model, synthetic data, training, and ablation.
//! - [`metrics`]: PSNR, SSIM, and histogram statistics.
//! - [`config`]: flat key-value run configuration.
//! - [`imageio`]: PNG/PPM input and output.

pub mod config;
pub mod csr;
pub mod error;
pub mod fsd;
pub mod imageio;
pub mod metrics;
pub mod pipeline;
pub mod numerics;
pub mod sdr;

pub use error::{DtpError, Result};
