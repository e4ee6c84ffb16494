//! Two-level late-interaction text-to-video retrieval.
//!
//! Queries are encoded as banks of token vectors; videos are indexed as a
//! bank of static frame features plus a bank of temporally contextualized
//! features. Relevance is the sum of the MeanMaxSim score against each bank.

pub(crate) mod codec;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod index;
pub mod losses;
pub mod scoring;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Matrix, Scalar, Tensor};

/// Double-precision tensor used for training and scoring.
pub type Tensor64 = Tensor<f64>;
pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
