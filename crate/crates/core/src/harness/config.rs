//! Experiment configuration.
//!
//! The file format is TOML restricted to scalar and array leaves. Nested
//! tables and dotted keys are equivalent (`[bon]\nn = 4` and `bon.n = 4`).
//! Every leaf is addressed by its dotted path; missing keys take the
//! documented default and unknown keys are rejected.
//!
//! | key | default |
//! |-----|---------|
//! | `seed` | 20250 |
//! | `world.frame_width`, `world.chunk_frames`, `world.num_conditions` | 32, 4, 2 |
//! | `world.sigma_px`, `world.v_max` | 1.5, 0.25 |
//! | `data.train_episodes`, `data.episode_chunks` | 1200, 4 |
//! | `schedule.num_steps`, `schedule.beta_min`, `schedule.beta_max` | 100, 1e-4, 0.02 |
//! | `denoiser.hidden`, `denoiser.cond_dim`, `denoiser.sigma_data` | [256, 256], 8, 0.5 |
//! | `denoiser.epochs`, `denoiser.batch_size`, `denoiser.learning_rate` | 60, 64, 1e-3 |
//! | `denoiser.dropout_ctx`, `denoiser.dropout_txt` | 0.1, 0.1 |
//! | `jepa.embed_dim`, `jepa.encoder_hidden`, `jepa.predictor_hidden` | 16, [128, 64], [64] |
//! | `jepa.momentum`, `jepa.epochs`, `jepa.batch_size`, `jepa.learning_rate` | 0.99, 30, 32, 1e-3 |
//! | `guidance.omega_ctx`, `guidance.omega_txt`, `guidance.omega_s` | 1.5, 2.0, 0.5 |
//! | `guidance.surprise_input` | `"x0hat"` (or `"xt"`) |
//! | `guidance.start_step` | `schedule.num_steps` |
//! | `bon.n` | 16 |
//! | `eval.num_conditions`, `eval.horizon_chunks`, `eval.context_chunks` | 50, 3, 1 |
//! | `oracle.n_samples`, `oracle.num_steps`, `oracle.beta_min`, `oracle.beta_max`, `oracle.seed` | 20000, 200, 1e-4, 0.02, 2025 |

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bon::DEFAULT_N;
use crate::diffusion::{DenoiserArch, SurpriseInput, TrainConfig};
use crate::gaussoracle::OracleConfig;
use crate::guidance::GuidanceWeights;
use crate::jepa::JepaArch;
use crate::worldsim::WorldConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed config: {0}")]
    Malformed(String),
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("key {key}: expected {expected}")]
    Type { key: String, expected: &'static str },
    #[error("key {key}: {message}")]
    Invalid { key: String, message: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_episodes: usize,
    /// Chunks per training episode.
    pub episode_chunks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub hidden: Vec<usize>,
    pub cond_dim: usize,
    /// Data scale for the denoiser preconditioning; 0 disables it.
    pub sigma_data: f64,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JepaConfig {
    pub embed_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub predictor_hidden: Vec<usize>,
    pub momentum: f64,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub weights: GuidanceWeights,
    pub surprise_input: SurpriseInput,
    pub start_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub num_conditions: usize,
    pub horizon_chunks: usize,
    /// Real chunks before generation starts; the last one is the context.
    pub context_chunks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRunConfig {
    pub n_samples: usize,
    pub num_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub jepa: JepaConfig,
    pub guidance: GuidanceConfig,
    pub bon_n: usize,
    pub eval: EvalConfig,
    pub oracle: OracleRunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let seed = 20250;
        let oracle = OracleConfig::default();
        Self {
            seed,
            world: WorldConfig::default(),
            data: DataConfig {
                train_episodes: 1200,
                episode_chunks: 4,
            },
            schedule: ScheduleConfig {
                num_steps: 100,
                beta_min: 1e-4,
                beta_max: 0.02,
            },
            denoiser: DenoiserConfig {
                hidden: vec![256, 256],
                cond_dim: 8,
                sigma_data: 0.5,
                train: TrainConfig {
                    epochs: 60,
                    batch_size: 64,
                    learning_rate: 1e-3,
                    dropout_ctx: 0.1,
                    dropout_txt: 0.1,
                    seed: 1,
                },
            },
            jepa: JepaConfig {
                embed_dim: 16,
                encoder_hidden: vec![128, 64],
                predictor_hidden: vec![64],
                momentum: 0.99,
                train: TrainConfig {
                    epochs: 30,
                    batch_size: 32,
                    learning_rate: 1e-3,
                    dropout_ctx: 0.0,
                    dropout_txt: 0.0,
                    seed: 2,
                },
            },
            guidance: GuidanceConfig {
                weights: GuidanceWeights {
                    omega_ctx: 1.5,
                    omega_txt: 2.0,
                    omega_s: 0.5,
                },
                surprise_input: SurpriseInput::X0hat,
                start_step: 100,
            },
            bon_n: DEFAULT_N,
            eval: EvalConfig {
                num_conditions: 50,
                horizon_chunks: 3,
                context_chunks: 1,
            },
            oracle: OracleRunConfig {
                n_samples: oracle.n_samples,
                num_steps: oracle.num_steps,
                beta_min: oracle.beta_min,
                beta_max: oracle.beta_max,
                seed: oracle.seed,
            },
        }
    }
}

impl ExperimentConfig {
    pub fn denoiser_arch(&self) -> DenoiserArch {
        DenoiserArch {
            chunk_frames: self.world.chunk_frames,
            frame_width: self.world.frame_width,
            num_conditions: self.world.num_conditions,
            cond_dim: self.denoiser.cond_dim,
            hidden: self.denoiser.hidden.clone(),
            num_steps: self.schedule.num_steps,
            sigma_data: (self.denoiser.sigma_data > 0.0).then_some(self.denoiser.sigma_data),
        }
    }

    pub fn jepa_arch(&self) -> JepaArch {
        JepaArch {
            chunk_len: self.world.chunk_len(),
            embed_dim: self.jepa.embed_dim,
            encoder_hidden: self.jepa.encoder_hidden.clone(),
            predictor_hidden: self.jepa.predictor_hidden.clone(),
            momentum: self.jepa.momentum,
        }
    }

    pub fn oracle_config(&self) -> OracleConfig {
        OracleConfig {
            n_samples: self.oracle.n_samples,
            num_steps: self.oracle.num_steps,
            beta_min: self.oracle.beta_min,
            beta_max: self.oracle.beta_max,
            seed: self.oracle.seed,
            ..OracleConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |key: &str, message: String| {
            Err(ConfigError::Invalid {
                key: key.to_string(),
                message,
            })
        };
        if let Err(e) = self.world.validate() {
            return invalid("world", e.to_string());
        }
        if self.data.train_episodes == 0 {
            return invalid("data.train_episodes", "must be >= 1".into());
        }
        if self.data.episode_chunks < 2 {
            return invalid("data.episode_chunks", "must be >= 2".into());
        }
        let s = &self.schedule;
        if s.num_steps == 0 {
            return invalid("schedule.num_steps", "must be >= 1".into());
        }
        if !(0.0 < s.beta_min && s.beta_min <= s.beta_max && s.beta_max < 1.0) {
            return invalid("schedule", "need 0 < beta_min <= beta_max < 1".into());
        }
        if self.denoiser.hidden.contains(&0) {
            return invalid("denoiser.hidden", "widths must be >= 1".into());
        }
        if !(self.denoiser.sigma_data >= 0.0 && self.denoiser.sigma_data.is_finite()) {
            return invalid("denoiser.sigma_data", "must be >= 0".into());
        }
        if self.denoiser.cond_dim == 0 {
            return invalid("denoiser.cond_dim", "must be >= 1".into());
        }
        if let Err(m) = self.denoiser.train.validate() {
            return invalid("denoiser", m);
        }
        if self.jepa.embed_dim == 0 || self.jepa.encoder_hidden.contains(&0) || self.jepa.predictor_hidden.contains(&0) {
            return invalid("jepa", "widths must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.jepa.momentum) {
            return invalid("jepa.momentum", format!("must lie in [0, 1), got {}", self.jepa.momentum));
        }
        if let Err(m) = self.jepa.train.validate() {
            return invalid("jepa", m);
        }
        if let Err(e) = self.guidance.weights.validate() {
            return invalid("guidance", e.to_string());
        }
        if self.bon_n == 0 {
            return invalid("bon.n", "must be >= 1".into());
        }
        if self.eval.num_conditions == 0 {
            return invalid("eval.num_conditions", "must be >= 1".into());
        }
        if self.eval.horizon_chunks == 0 {
            return invalid("eval.horizon_chunks", "must be >= 1".into());
        }
        if self.eval.context_chunks == 0 {
            return invalid("eval.context_chunks", "must be >= 1".into());
        }
        if self.world.chunk_frames * self.eval.context_chunks < 2 {
            return invalid("eval.context_chunks", "context must span at least 2 frames".into());
        }
        let o = &self.oracle;
        if o.n_samples < 2 || o.num_steps == 0 {
            return invalid("oracle", "need n_samples >= 2 and num_steps >= 1".into());
        }
        if !(0.0 < o.beta_min && o.beta_min <= o.beta_max && o.beta_max < 1.0) {
            return invalid("oracle", "need 0 < beta_min <= beta_max < 1".into());
        }
        Ok(())
    }
}

/// Flattened view of a parsed file; entries are removed as they are consumed.
struct Leaves(BTreeMap<String, toml::Value>);

fn flatten(prefix: &str, table: toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other);
            }
        }
    }
}

impl Leaves {
    fn take(&mut self, key: &str) -> Option<toml::Value> {
        self.0.remove(key)
    }

    fn type_err<T>(key: &str, expected: &'static str) -> Result<T> {
        Err(ConfigError::Type {
            key: key.to_string(),
            expected,
        })
    }

    fn usize(&mut self, key: &str, slot: &mut usize) -> Result<()> {
        match self.take(key) {
            None => Ok(()),
            Some(toml::Value::Integer(i)) if i >= 0 => {
                *slot = i as usize;
                Ok(())
            }
            Some(_) => Self::type_err(key, "a non-negative integer"),
        }
    }

    fn u64(&mut self, key: &str, slot: &mut u64) -> Result<()> {
        match self.take(key) {
            None => Ok(()),
            Some(toml::Value::Integer(i)) if i >= 0 => {
                *slot = i as u64;
                Ok(())
            }
            Some(_) => Self::type_err(key, "a non-negative integer"),
        }
    }

    fn f64(&mut self, key: &str, slot: &mut f64) -> Result<()> {
        match self.take(key) {
            None => Ok(()),
            Some(toml::Value::Float(f)) => {
                *slot = f;
                Ok(())
            }
            Some(toml::Value::Integer(i)) => {
                *slot = i as f64;
                Ok(())
            }
            Some(_) => Self::type_err(key, "a number"),
        }
    }

    fn widths(&mut self, key: &str, slot: &mut Vec<usize>) -> Result<()> {
        match self.take(key) {
            None => Ok(()),
            Some(toml::Value::Array(items)) => {
                let mut out = Vec::with_capacity(items.len());
                for v in items {
                    match v {
                        toml::Value::Integer(i) if i >= 1 => out.push(i as usize),
                        _ => return Self::type_err(key, "an array of positive integers"),
                    }
                }
                *slot = out;
                Ok(())
            }
            Some(_) => Self::type_err(key, "an array of positive integers"),
        }
    }

    fn surprise_input(&mut self, key: &str, slot: &mut SurpriseInput) -> Result<()> {
        match self.take(key) {
            None => Ok(()),
            Some(toml::Value::String(s)) => {
                *slot = match s.as_str() {
                    "x0hat" => SurpriseInput::X0hat,
                    "xt" => SurpriseInput::Xt,
                    _ => return Self::type_err(key, "\"x0hat\" or \"xt\""),
                };
                Ok(())
            }
            Some(_) => Self::type_err(key, "\"x0hat\" or \"xt\""),
        }
    }

    fn train(&mut self, section: &str, cfg: &mut TrainConfig, dropout: bool) -> Result<()> {
        self.usize(&format!("{section}.epochs"), &mut cfg.epochs)?;
        self.usize(&format!("{section}.batch_size"), &mut cfg.batch_size)?;
        self.f64(&format!("{section}.learning_rate"), &mut cfg.learning_rate)?;
        self.u64(&format!("{section}.seed"), &mut cfg.seed)?;
        if dropout {
            self.f64(&format!("{section}.dropout_ctx"), &mut cfg.dropout_ctx)?;
            self.f64(&format!("{section}.dropout_txt"), &mut cfg.dropout_txt)?;
        }
        Ok(())
    }
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Malformed(e.to_string()))?;
    let mut flat = BTreeMap::new();
    flatten("", table, &mut flat);
    let mut leaves = Leaves(flat);
    let mut cfg = ExperimentConfig::default();
    let l = &mut leaves;

    l.u64("seed", &mut cfg.seed)?;

    l.usize("world.frame_width", &mut cfg.world.frame_width)?;
    l.usize("world.chunk_frames", &mut cfg.world.chunk_frames)?;
    l.usize("world.num_conditions", &mut cfg.world.num_conditions)?;
    l.f64("world.sigma_px", &mut cfg.world.sigma_px)?;
    l.f64("world.v_max", &mut cfg.world.v_max)?;

    l.usize("data.train_episodes", &mut cfg.data.train_episodes)?;
    l.usize("data.episode_chunks", &mut cfg.data.episode_chunks)?;

    l.usize("schedule.num_steps", &mut cfg.schedule.num_steps)?;
    l.f64("schedule.beta_min", &mut cfg.schedule.beta_min)?;
    l.f64("schedule.beta_max", &mut cfg.schedule.beta_max)?;

    l.widths("denoiser.hidden", &mut cfg.denoiser.hidden)?;
    l.usize("denoiser.cond_dim", &mut cfg.denoiser.cond_dim)?;
    l.f64("denoiser.sigma_data", &mut cfg.denoiser.sigma_data)?;
    l.train("denoiser", &mut cfg.denoiser.train, true)?;

    l.usize("jepa.embed_dim", &mut cfg.jepa.embed_dim)?;
    l.widths("jepa.encoder_hidden", &mut cfg.jepa.encoder_hidden)?;
    l.widths("jepa.predictor_hidden", &mut cfg.jepa.predictor_hidden)?;
    l.f64("jepa.momentum", &mut cfg.jepa.momentum)?;
    l.train("jepa", &mut cfg.jepa.train, false)?;

    l.f64("guidance.omega_ctx", &mut cfg.guidance.weights.omega_ctx)?;
    l.f64("guidance.omega_txt", &mut cfg.guidance.weights.omega_txt)?;
    l.f64("guidance.omega_s", &mut cfg.guidance.weights.omega_s)?;
    l.surprise_input("guidance.surprise_input", &mut cfg.guidance.surprise_input)?;
    // An absent start step follows the schedule length.
    cfg.guidance.start_step = cfg.schedule.num_steps;
    l.usize("guidance.start_step", &mut cfg.guidance.start_step)?;

    l.usize("bon.n", &mut cfg.bon_n)?;

    l.usize("eval.num_conditions", &mut cfg.eval.num_conditions)?;
    l.usize("eval.horizon_chunks", &mut cfg.eval.horizon_chunks)?;
    l.usize("eval.context_chunks", &mut cfg.eval.context_chunks)?;

    l.usize("oracle.n_samples", &mut cfg.oracle.n_samples)?;
    l.usize("oracle.num_steps", &mut cfg.oracle.num_steps)?;
    l.f64("oracle.beta_min", &mut cfg.oracle.beta_min)?;
    l.f64("oracle.beta_max", &mut cfg.oracle.beta_max)?;
    l.u64("oracle.seed", &mut cfg.oracle.seed)?;

    if let Some(key) = leaves.0.keys().next() {
        return Err(ConfigError::UnknownKey(key.clone()));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&text)
}
