//! Experiment harness for cooperative meta-learning: TOML run configs,
//! metrics files, run comparison and parameter sweeps.

pub mod compare;
pub mod config;
mod error;
pub mod metrics;
pub mod run;
pub mod sweep;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
pub use run::{run, RunOutcome};
