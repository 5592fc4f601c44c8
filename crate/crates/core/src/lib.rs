//! Diversity-biased sampling for diffusion-based ambiguous binary segmentation.
//!
//! The crate bundles everything needed to study how training-free sampling
//! methods find more modes of a multi-modal segmentation distribution:
//!
//! * [`maskgrid`]: mask/latent grids, the ±1 encoding, IoU and distance functions.
//! * [`denoiser`]: denoisers `D(x; t, c)` with vector-Jacobian products, an exact
//!   closed-form mixture denoiser and a small trainable MLP.
//! * [`sampler`]: the EDM noise schedule and deterministic Heun integration.
//! * [`diversity`]: particle guidance, SPELL repellence, and CADS conditioning noise.
//! * [`pruning`]: k-medoids clustering of one-step predictions.
//! * [`datasets`]: synthetic multi-modal generators and the `MMSEG1` container.
//! * [`metrics`]: Hungarian-matched IoU, distinct modes, image quality, calibration.
//! * [`cli`]: the experiment runner behind the `divseg` binary.

// `!(x > 0.0)` is used deliberately to reject NaN together with the bound.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod datasets;
pub mod denoiser;
pub mod diversity;
mod error;
pub mod maskgrid;
pub mod metrics;
pub mod pruning;
pub mod rng;
pub mod sampler;

pub use error::{Error, ErrorKind, Result};
pub use maskgrid::{BinaryMask, LatentGrid};
