//! Minimal reverse-mode autodiff over dense `f64` NCHW tensors.
//!
//! Built for the image-immunization networks: im2col + GEMM convolutions,
//! kernel-2 transposed convolutions, instance norm, pooling, resampling and
//! an 8×8 block DCT, all with hand-written backward passes. Batch-level
//! loops run on rayon when the `parallel` feature is on; see [`parallel`].

#![allow(clippy::should_implement_trait, clippy::too_many_arguments)]

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod ops;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig, AdamSlot};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
