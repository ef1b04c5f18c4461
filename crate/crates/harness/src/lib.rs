//! Experiment harness: configuration, evaluation and ablation runs, run
//! persistence, ECDF profiles and theory checks.

pub mod checks;
pub mod config;
pub mod ecdf;
mod error;
pub mod experiment;
pub mod record;

pub use error::{HarnessError, Result};
