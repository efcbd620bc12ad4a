//! Quantization-aware training laboratory.
//!
//! Building blocks: a dense tensor engine with reverse-mode differentiation
//! (`tensor`), asymmetric uniform fake quantization with straight-through
//! gradients (`quantizer`), low-rank error-compensation modules with a
//! rank-decay schedule (`auxrank`), a toy diffusion stack (`toydiff`), the
//! QAT training loop with convergence diagnostics (`trainer`), and a 4-bit
//! integer execution path (`intexec`).

pub mod auxrank;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod intexec;
pub mod quantizer;
pub mod rng;
pub mod scalar;
pub mod svd;
pub mod tensor;
pub mod toydiff;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;

/// Training-path default: 64-bit floats.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
