//! Exact limit-law numerics and a stationary TASEP simulator for the
//! two-point function and its KPZ scaling function.

pub mod airy_limit;
pub mod error;
pub mod finite_time;
pub mod fredholm;
pub mod harness;
pub mod specialfn;
pub mod tasep_sim;

pub use error::{KpzError, Result};
