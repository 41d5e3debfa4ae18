//! Sparse mixture-of-experts routing with top-k gating, capacity-limited
//! dispatch and k top-1 expert prototyping, plus an expert-parallel cost
//! simulator and a small training harness.

pub mod cli;
pub mod cluster_sim;
pub mod error;
pub mod moe_layer;
pub mod numerics;
pub mod routing;
pub mod training;

pub use error::{Error, Result};
