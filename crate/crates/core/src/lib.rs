//! Training-free conditional sampling for flow-matching models.
//!
//! The crate provides the sampling state types and noise schedule, two toy
//! densities with exact posterior oracles, velocity-field backends, the
//! h-control sampler and its baselines, the block-precision locality
//! diagnostic and evaluation metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod densities;
pub mod error;
pub mod flowmodel;
pub mod guidance;
pub mod linalg;
pub mod locality;
pub mod metrics;
pub mod rng;
pub mod schedule;

pub use error::{HctlError, Result};
