//! Unsupervised domain adaptation under class imbalance: class-conditional
//! feature alignment losses, calibration of target pseudo-labels for label
//! shift, a two-stage trainer and the experiment plumbing around it.

// NaN-rejecting guards are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod experiment;
pub mod kernel;
pub mod losses;
pub mod lsc;
pub mod model;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
