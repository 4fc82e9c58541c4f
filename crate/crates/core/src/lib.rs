//! KL-geodesic conditional flow matching for discrete sequences.
//!
//! Tokens live on the probability simplex; noise and data are joined by the
//! KL geodesic, which is a straight line in logit space. A denoiser learns the
//! per-position posterior over clean tokens, and four inference schemes turn
//! that denoiser into a generator. The [`oracle`] module computes exact
//! posteriors on tiny instances so the learned quantities can be checked
//! against ground truth.

pub mod cli;
pub mod corpus;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod inference;
pub mod oracle;
pub mod rng;
pub mod simplex;
pub mod trainer;

pub use error::{Error, Result};
