//! Command-line pipeline around `soh-core`: configuration, per-stage source
//! fitting, transfer to target batteries, reports, plots and run
//! verification.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod run;

pub use config::PipelineConfig;
pub use error::{CliError, Result};
pub use report::EvaluationReport;
