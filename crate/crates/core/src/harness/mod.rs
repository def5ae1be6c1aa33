//! Configuration, experiment orchestration and report emission.

pub mod config;
pub mod experiment;
pub mod report;

use thiserror::Error;

pub use config::{parse_config, parse_config_str, ConfigError, ExperimentConfig};
pub use experiment::{run_experiment, Arm, RunOptions};
pub use report::{write_report, Report, Timings};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    World(#[from] crate::worldsim::WorldError),
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
    #[error(transparent)]
    Jepa(#[from] crate::jepa::JepaError),
    #[error(transparent)]
    Oracle(#[from] crate::gaussoracle::OracleError),
    #[error("cache entry {dir} was trained under config hash {found}, expected {expected}")]
    CacheMismatch { dir: String, expected: String, found: String },
    #[error("cache checksum mismatch for {0}")]
    CacheChecksum(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
