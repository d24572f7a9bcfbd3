//! Experiment orchestration around the `active-slam` core: TOML
//! configuration, trial scheduling, and CSV/manifest output.

pub mod config;
pub mod experiment;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, RunOutput};
