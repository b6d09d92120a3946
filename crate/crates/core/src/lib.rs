//! Gradient inversion attacks against federated learning.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every numeric piece:
//! a small reverse-mode autodiff engine whose backward pass is itself
//! differentiable, a CNN model zoo, a deterministic single-client FL
//! simulator, the reconstruction attacks (DLG-style L2, cosine with total
//! variation, and the layer-weighted one-batch attack), cross-epoch update
//! matching with joint reconstruction, and image quality metrics.
//!
//! IO, configuration and the experiment runner live in the `gradinv` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod attack;
pub mod autodiff;
pub mod clock;
pub mod data;
mod error;
pub mod flsim;
pub mod metrics;
pub mod multiepoch;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
