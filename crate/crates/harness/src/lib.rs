//! Configuration, orchestration and persistence for `pchid-core`
//! experiments.

pub mod analysis;
pub mod config;
pub mod experiment;
pub mod testeval;

pub use config::{parse_config, ConfigError, ExperimentConfig};
pub use experiment::{run_experiment, run_seed, sweep, RunRecord, Summary};
