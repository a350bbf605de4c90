//! Articulated-object radiance fields with per-state latent embeddings.
//!
//! The crate trains a small neural radiance field whose hidden layers are
//! modulated by per-articulation-state latent codes through low-rank
//! hypernetworks, on multi-view data produced by a built-in articulated-scene
//! ray tracer. Interpolating the latents synthesizes unseen intermediate
//! articulation states.
//!
//! Core numerics are generic over [`scalar::Scalar`] (`f32`/`f64`); training
//! runs in `f32`, gradient and quadrature tests in `f64`.

pub mod autodiff;
pub mod error;
pub mod scalar;

pub use autodiff::{grad_check, OpSpec, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Test-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Training-precision tape.
pub type Tape32 = Tape<f32>;
/// Test-precision tape.
pub type Tape64 = Tape<f64>;
