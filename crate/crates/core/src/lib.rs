//! Reward learning from pairwise preferences with adaptive per-pair
//! preference scaling.

// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bandit;
pub mod data;
pub mod dpo;
pub mod error;
pub mod loss;
pub mod model;
pub mod optim;
mod serde_inf;
pub mod tau;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
