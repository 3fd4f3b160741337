//! Experiment harness: configuration files, persisted runs, sweeps, plots
//! and sample grids on top of `fplab-core`.

pub mod check;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod io;
pub mod plot;
pub mod sweep;

pub use config::{desk_config, ExperimentConfig, SweepParam, SweepSpec};
pub use error::{HarnessError, Result};
pub use experiment::{execute, run_experiment, RunResult, RunSummary};
