//! Toy 1-D physics world: a ball bouncing between two walls.
//!
//! The world produces the training episodes, renders frames as Gaussian bumps,
//! and re-simulates continuations to score the physical plausibility of
//! generated frames.

mod dataset;

pub use dataset::{read_dataset, write_dataset, Dataset, DatasetHeader};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("the NULL condition cannot drive the simulator")]
    NullCondition,
    #[error("condition {0} has no physics defined (known: 0 = elastic, 1 = damped)")]
    UnknownCondition(usize),
    #[error("invalid world state: position {position}, velocity {velocity}")]
    InvalidState { position: f64, velocity: f64 },
    #[error("frame count {frames} is not a multiple of the chunk length {chunk}")]
    RaggedEpisode { frames: usize, chunk: usize },
    #[error("undecodable frame (no foreground intensity)")]
    UndecodableFrame,
    #[error("context needs at least 2 frames, got {0}")]
    ShortContext(usize),
    #[error("frame width {0} is below the minimum of 8 pixels")]
    FrameTooNarrow(usize),
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, WorldError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    /// Pixels per frame (D).
    pub frame_width: usize,
    /// Frames per chunk (F).
    pub chunk_frames: usize,
    /// Number of condition labels (C).
    pub num_conditions: usize,
    /// Width of the rendered bump, in pixels.
    pub sigma_px: f64,
    pub v_max: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frame_width: 32,
            chunk_frames: 4,
            num_conditions: 2,
            sigma_px: 1.5,
            v_max: 0.25,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_width < 8 {
            return Err(WorldError::FrameTooNarrow(self.frame_width));
        }
        if self.chunk_frames == 0 {
            return Err(WorldError::InvalidConfig("chunk_frames must be >= 1".into()));
        }
        if self.num_conditions == 0 || self.num_conditions > 2 {
            return Err(WorldError::InvalidConfig(format!(
                "num_conditions must be 1 or 2, got {}",
                self.num_conditions
            )));
        }
        if !(self.sigma_px > 0.0) || !(self.v_max > 0.0) {
            return Err(WorldError::InvalidConfig(
                "sigma_px and v_max must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn chunk_len(&self) -> usize {
        self.chunk_frames * self.frame_width
    }

    /// One pixel expressed in position units.
    pub fn pixel(&self) -> f64 {
        1.0 / (self.frame_width - 1) as f64
    }
}

/// Conditioning label. `Null` exists only for the classifier-free branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Label(usize),
    Null,
}

impl Condition {
    pub fn label(self) -> Option<usize> {
        match self {
            Condition::Label(id) => Some(id),
            Condition::Null => None,
        }
    }

    fn restitution(self) -> Result<f64> {
        match self {
            Condition::Null => Err(WorldError::NullCondition),
            Condition::Label(0) => Ok(1.0),
            Condition::Label(1) => Ok(0.5),
            Condition::Label(id) => Err(WorldError::UnknownCondition(id)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub position: f64,
    pub velocity: f64,
}

/// One frame step. Returns the new state and whether a wall was hit.
pub fn step_with_contact(s: WorldState, cond: Condition) -> Result<(WorldState, bool)> {
    let e = cond.restitution()?;
    if !(0.0..=1.0).contains(&s.position) || !s.velocity.is_finite() {
        return Err(WorldError::InvalidState {
            position: s.position,
            velocity: s.velocity,
        });
    }
    let mut p = s.position + s.velocity;
    let mut v = s.velocity;
    let mut hit = false;
    // Overshoot past a wall is folded back, scaled by the restitution.
    loop {
        if p > 1.0 {
            p = 1.0 - e * (p - 1.0);
            v = -e * v;
        } else if p < 0.0 {
            p = -e * p;
            v = -e * v;
        } else {
            break;
        }
        hit = true;
    }
    Ok((WorldState { position: p, velocity: v }, hit))
}

pub fn step_state(s: WorldState, cond: Condition) -> Result<WorldState> {
    step_with_contact(s, cond).map(|(next, _)| next)
}

/// Gaussian bump on a -1 background, peak +1 at `position·(D−1)`.
pub fn render_frame(s: WorldState, width: usize, sigma_px: f64) -> Result<Vec<f64>> {
    if width < 8 {
        return Err(WorldError::FrameTooNarrow(width));
    }
    let center = s.position * (width - 1) as f64;
    let inv = 1.0 / (2.0 * sigma_px * sigma_px);
    Ok((0..width)
        .map(|i| {
            let d = i as f64 - center;
            -1.0 + 2.0 * (-d * d * inv).exp()
        })
        .collect())
}

/// Intensity centroid of the (clamped) frame, normalized to [0, 1].
pub fn decode_position(frame: &[f64]) -> Result<f64> {
    let mut mass = 0.0;
    let mut moment = 0.0;
    for (i, &px) in frame.iter().enumerate() {
        let w = (px.clamp(-1.0, 1.0) + 1.0) * 0.5;
        mass += w;
        moment += w * i as f64;
    }
    if mass < 1e-9 || frame.len() < 2 {
        return Err(WorldError::UndecodableFrame);
    }
    Ok(moment / mass / (frame.len() - 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub condition: usize,
    pub seed: u64,
    pub frames: Vec<Vec<f64>>,
}

/// A block of `frames` consecutive frames, stored row-major (frame, pixel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameChunk {
    pub frames: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FrameChunk {
    pub fn from_frames(frames: &[Vec<f64>]) -> Self {
        let width = frames.first().map_or(0, Vec::len);
        Self {
            frames: frames.len(),
            width,
            data: frames.iter().flatten().copied().collect(),
        }
    }

    pub fn from_flat(frames: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), frames * width, "chunk shape mismatch");
        Self { frames, width, data }
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn iter_frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.width)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Initial state for an episode seed: position in [0.1, 0.9], speed in [0.05, 0.2].
pub fn initial_state(seed: u64) -> WorldState {
    let mut rng = rng::seeded(seed);
    let position = rng.random_range(0.1..=0.9);
    let speed = rng.random_range(0.05..=0.2);
    let velocity = if rng.random_bool(0.5) { speed } else { -speed };
    WorldState { position, velocity }
}

/// Ground-truth trajectory of `num_frames` states, plus per-step contact flags
/// (`contacts[k]` is true when the step from state k to k+1 hit a wall).
pub fn simulate(seed: u64, cond: Condition, num_frames: usize) -> Result<(Vec<WorldState>, Vec<bool>)> {
    let mut states = Vec::with_capacity(num_frames);
    let mut contacts = Vec::with_capacity(num_frames.saturating_sub(1));
    let mut s = initial_state(seed);
    for k in 0..num_frames {
        states.push(s);
        if k + 1 < num_frames {
            let (next, hit) = step_with_contact(s, cond)?;
            contacts.push(hit);
            s = next;
        }
    }
    Ok((states, contacts))
}

pub fn make_episode(cfg: &WorldConfig, seed: u64, cond: Condition, num_frames: usize) -> Result<Episode> {
    if num_frames % cfg.chunk_frames != 0 {
        return Err(WorldError::RaggedEpisode {
            frames: num_frames,
            chunk: cfg.chunk_frames,
        });
    }
    let label = cond.label().ok_or(WorldError::NullCondition)?;
    let (states, _) = simulate(seed, cond, num_frames)?;
    let frames = states
        .into_iter()
        .map(|s| render_frame(s, cfg.frame_width, cfg.sigma_px))
        .collect::<Result<Vec<_>>>()?;
    Ok(Episode {
        condition: label,
        seed,
        frames,
    })
}

pub fn chunk_episode(episode: &Episode, chunk_frames: usize) -> Vec<FrameChunk> {
    episode
        .frames
        .chunks_exact(chunk_frames)
        .map(FrameChunk::from_frames)
        .collect()
}

/// True when the last two context states sit at least 2σ_px from both walls
/// and no reflection happened between them, so a two-point velocity fit is exact.
pub fn context_is_fit_safe(cfg: &WorldConfig, states: &[WorldState], contacts: &[bool], context_frames: usize) -> bool {
    if context_frames < 2 || states.len() < context_frames {
        return false;
    }
    let margin = 2.0 * cfg.sigma_px * cfg.pixel();
    let interior = |s: &WorldState| s.position >= margin && s.position <= 1.0 - margin;
    interior(&states[context_frames - 2])
        && interior(&states[context_frames - 1])
        && !contacts[context_frames - 2]
}

/// RMSE between decoded positions of `generated` and a re-simulation fitted to
/// the last two context frames. Undecodable generated frames count as error 1.
pub fn plausibility_error(generated: &[Vec<f64>], context: &[Vec<f64>], cond: Condition) -> Result<f64> {
    if context.len() < 2 {
        return Err(WorldError::ShortContext(context.len()));
    }
    let p_prev = decode_position(&context[context.len() - 2])?;
    let p_last = decode_position(&context[context.len() - 1])?;
    let mut s = WorldState {
        position: p_last.clamp(0.0, 1.0),
        velocity: p_last - p_prev,
    };
    if generated.is_empty() {
        return Ok(0.0);
    }
    let mut sq = 0.0;
    for frame in generated {
        s = step_state(s, cond)?;
        sq += match decode_position(frame) {
            Ok(p) => (p - s.position).powi(2),
            Err(WorldError::UndecodableFrame) => 1.0,
            Err(e) => return Err(e),
        };
    }
    Ok((sq / generated.len() as f64).sqrt())
}
