//! Run configuration, parameter clouds and the numerical studies.

pub mod config;
pub mod report;
pub mod sampling;
pub mod studies;

use thiserror::Error;

pub use config::RunConfig;
pub use sampling::{sample_cloud, Cloud};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("parameter box is infeasible:\n{}", .0.join("\n"))]
    InfeasibleBox(Vec<String>),
    #[error("rejection sampling starved: {accepted} of {attempts} draws passed the joint constraints (model domain, strip, variance window)")]
    Starvation { attempts: u64, accepted: u64 },
}
