//! Experiment configuration, orchestration and result files for the
//! `dkmlmc` binary.

pub mod config;
pub mod run;

pub use config::{parse_config, parse_config_file, ConfigError, ExperimentConfig, RunKind};
pub use run::{output_dir, run, run_with_cancel, ErrorClass, RunOutcome, OUTPUT_DIR_ENV};
