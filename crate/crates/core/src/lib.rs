#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Joint training toolkit for retrieval (IR) and semantic textual
//! similarity (STS) embeddings.
//!
//! The numeric core ([`losses`], [`metrics`], [`geometry`], [`linalg`]) is
//! generic over [`Scalar`] (`f32` or `f64`); the toy encoder, the trainer
//! and checkpoints are fixed to `f64`. The aliases below name the `f64`
//! instantiations used throughout training.

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod report;
pub mod sampler;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// `f64` embedding matrix.
pub type Matrix = linalg::Matrix<f64>;
/// `f32` embedding matrix.
pub type Matrix32 = linalg::Matrix<f32>;
/// `f64` retrieval batch.
pub type IrBatch = losses::IrBatch<f64>;
/// Loss weights and temperatures in `f64`.
pub type StsLossWeights = losses::StsLossWeights<f64>;
