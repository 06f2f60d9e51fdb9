//! Experiment harness for input/epistemic/aleatoric uncertainty
//! decomposition: configuration, artifact formats, grid evaluation,
//! summaries and heatmaps. The `uniunc` binary wraps [`experiment`].

pub mod config;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod io;
pub mod render;
pub mod summary;

pub use config::{EuName, ExperimentConfig, GridSpec, IuName, TaskKind};
pub use error::{CliError, Result};
