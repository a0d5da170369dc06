//! Numerical laboratory for persistence probabilities of Gaussian processes,
//! random polynomials with regularly varying coefficient variances, and the
//! heat equation started from white noise.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coeffspec;
pub mod error;
pub mod heatfield;
pub mod kernels;
pub mod numerics;
pub mod persist;
pub mod sampler;

pub use error::{AccuracyWarning, LabError, Result};
