//! Configuration, batch runner and self-diagnostics behind the `cmi-dps` binary.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod experiment;

pub use config::{ConfigError, ExperimentConfig, Problem, Source};
pub use diagnostics::{diagnose_problem, Report, Status};
pub use error::CliError;
pub use experiment::{run_experiment, ExperimentOutput, Row, Summary};
