//! Chunkwise DDPM: noise schedule, ε-prediction denoiser with learned NULL
//! branches, denoising-score-matching training, and the autoregressive guided
//! sampler.

mod denoiser;
mod sampler;
mod schedule;
mod train;

pub use denoiser::{Denoiser, DenoiserArch, DenoiserInput, TIME_FREQUENCIES};
pub use sampler::{
    generate_chunk, generate_sequence, generate_sequence_observed, sample_step, SamplerConfig,
    SurpriseInput, SurpriseModel,
};
pub use schedule::{
    eps_from_score, forward_noise, make_schedule, score_from_eps, tweedie_x0, NoiseSchedule,
};
pub use train::{dsm_loss, pairs_from_episodes, train_denoiser, DenoiserTrainReport, TrainPair};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guidance::GuidanceError;
use crate::jepa::JepaError;
use crate::nnkit::NnError;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} outside [1, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("score is undefined where alpha_bar = 1")]
    DegenerateNoiseLevel,
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("condition {0} is outside the trained label range")]
    UnknownCondition(usize),
    #[error("surprise guidance requested (omega_s > 0) but no surprise model was supplied")]
    MissingSurpriseModel,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("bad denoiser checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Surprise(#[from] JepaError),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(DiffusionError::Shape { what, expected, got })
    }
}

/// Optimizer settings shared by the denoiser and JEPA trainers. The dropout
/// probabilities only apply to the denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout_ctx: f64,
    pub dropout_txt: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return Err(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        for (name, p) in [("dropout_ctx", self.dropout_ctx), ("dropout_txt", self.dropout_txt)] {
            if !(0.0..1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        Ok(())
    }
}
