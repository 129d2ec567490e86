//! Dataset interface toolkit: learn one text-space token per class, generate
//! counterfactual images under named distribution shifts, filter them by
//! image/text embedding similarity and measure classifier robustness.
//!
//! The numeric kernels (optimizer, similarity, percentile, CDF, line fit)
//! are generic over [`Scalar`]; the aliases below fix the precision used by
//! the pipeline.

pub mod backends;
pub mod error;
pub mod evaluation;
pub mod filtering;
pub mod generation;
pub mod inversion;
pub mod library;
pub mod optim;
pub mod registry;
pub mod scalar;
pub mod types;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use types::*;

/// Precision of similarity scores, accuracies and the inversion optimizer state.
pub type Real = f64;
/// Precision of stored token embeddings.
pub type EmbeddingReal = f32;

pub type AdamW64 = optim::AdamW<f64>;
pub type AdamW32 = optim::AdamW<f32>;
pub type LineFit64 = evaluation::LineFit<f64>;
pub type LineFit32 = evaluation::LineFit<f32>;
