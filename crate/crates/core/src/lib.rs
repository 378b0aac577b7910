//! Frame-aware video diffusion at desk scale.
//!
//! Every frame of a clip carries its own diffusion time (a vectorized
//! timestep, [`schedule::Vtv`]). The crate provides the variance-preserving
//! noise schedule, per-frame forward perturbation, vectorized DDPM/DDIM
//! samplers with frozen-frame conditioning, a small adaLN-Zero transformer
//! denoiser trained with probabilistic timestep sampling, and closed-form
//! Gaussian oracles used to verify all of the above.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration
//! and the command line live in the companion `fvdm` crate.
#![cfg_attr(not(test), no_std)]
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod diffusion;
mod error;
pub mod eval;
pub mod linalg;
pub(crate) mod math;
pub mod models;
pub mod rng;
pub mod schedule;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
