//! Model-based image reconstruction via convolutional sparse coding with
//! spatially adaptive, network-estimated sparsity maps.
//!
//! The pipeline reconstructs a complex image from masked, noisy frequency
//! data: a closed-form low/high-pass split, a small CNN that estimates
//! per-filter sparsity level maps, an unrolled accelerated proximal
//! gradient solver over a pre-trained convolutional dictionary, and a
//! residual connection adding the low-pass part back. Everything is
//! differentiable through a self-contained reverse-mode tape so the
//! estimator trains end-to-end, with optional truncated backpropagation
//! through the solver.

pub mod dictlearn;
pub mod error;
pub mod estimator;
pub mod fft;
pub mod fista;
pub mod highpass;
pub mod io;
pub mod linops;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod sim;
pub mod tape;
pub mod unet;
pub mod tensor;

pub use error::{Error, Result};
