//! Toy target densities with exact samplers and exact conditional oracles.

mod checkerboard;
mod gmrf;

pub use checkerboard::{Checkerboard, ObsModel};
pub use gmrf::{GaussianConditional, GmrfParams, GmrfSpec};
