//! Functional data analysis of insurance loss-development triangles.
//!
//! Development curves of incremental loss ratios are ranked with functional
//! depth, completed from a partial observation by functional PCA with a
//! penalized shrinkage toward covariate-driven prior scores, and wrapped in
//! bootstrap predictive regions. A Mack chain-ladder benchmark and forecast
//! scoring rules sit alongside.

pub mod error;
pub mod stats;
pub mod depth;
pub mod triangle;
pub mod fpca;
pub mod cv;
pub mod regression;
pub mod completion;
pub mod seed;
pub mod bootstrap;
pub mod chain_ladder;
pub mod scoring;
pub mod synthetic;
pub mod workflow;

pub use error::{Error, ErrorClass, Result};
