//! G-buffer conditioned autoregressive diffusion rendering at desk scale.
//!
//! The numeric layer (tensors, reverse-mode autodiff, layers, optimizer) is
//! generic over [`Scalar`] so the same model code runs in `f32` for training
//! and inference and in `f64` for finite-difference gradient checks.

pub mod autograd;
pub mod conditioning;
pub mod denoiser;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod scene;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use autograd::{backward, grad, Grads, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::{Tensor, Tensor32, Tensor64};
