//! Configuration-driven harness around `weaktomo-core`: control design,
//! record simulation, reconstruction, SNR and multi-run sweeps, control
//! error sensitivity, and a self-validation suite.

pub mod config;
pub mod error;
pub mod experiments;
pub mod formats;
pub mod validate;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use experiments::Experiment;
