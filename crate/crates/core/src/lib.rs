//! Learned evolutionary optimization by unrolled, averaged fixed-point
//! iterations: benchmarks, the learned operator, the gated composite
//! solver, meta-training, classical baselines and theory checks.

pub mod baselines;
pub mod benchmarks;
mod error;
pub mod evaluate;
pub mod meta;
pub mod operator;
pub mod population;
pub mod solver;
pub mod theory;

pub use error::{Error, Result};
