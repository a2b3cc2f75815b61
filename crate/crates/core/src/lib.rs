//! Stochastic whitening batch normalization, its BN and IterNorm baselines,
//! and a small MLP trainer to compare them.
//!
//! Activations are `d x n` matrices: one row per feature, one column per sample.

pub mod baselines;
pub mod checkpoint;
pub mod criteria;
pub mod data;
pub mod error;
pub mod fmt;
pub mod matrix;
pub mod nn;
pub mod norm;
pub mod swbn;

pub use criteria::Criterion;
pub use error::{Error, Result};
pub use matrix::{Matrix, OpCounter};
pub use norm::{NormLayer, NormOptions, NormRegistry};
pub use swbn::{BackwardMode, SwbnState};
