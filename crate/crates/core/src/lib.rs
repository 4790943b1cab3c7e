//! Compression-aware training by occasional regularization.
//!
//! A model is trained normally for `pnr` mini-batches, then its weights
//! are pushed through a compression operator (pruning, binary-code
//! quantization, truncated or tiled SVD, Tucker-2, decay, noise) and
//! training resumes from the transformed full-precision weights.

pub mod analysis;
pub mod compress;
pub mod data;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{RngStream, Tensor};
