//! Desk-scale joint-embedding predictive model.
//!
//! An encoder maps a flattened chunk to an embedding, a predictor maps the
//! embedding of a context chunk to the expected embedding of the next chunk,
//! and an EMA copy of the encoder provides stop-gradient training targets.
//!
//! Surprise is `1 − cos(P(E(context)), E(candidate))`, so 0 means the
//! candidate is exactly what the world model expected and larger is worse.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::TrainConfig;
use crate::nnkit::{self, backward, forward_trace, init_params, load_params, save_params, Adam, MlpSpec, NnError, ParamVector};
use crate::rng;
use crate::worldsim::FrameChunk;

#[derive(Debug, Error)]
pub enum JepaError {
    #[error("degenerate embedding (norm {0:e} below 1e-12)")]
    DegenerateEmbedding(f64),
    #[error("need at least 2 chunks per episode, got {0}")]
    TooFewChunks(usize),
    #[error("empty training set")]
    EmptyDataset,
    #[error("encoder and EMA target manifests differ")]
    ManifestMismatch,
    #[error("invalid momentum {0} (must lie in [0, 1])")]
    InvalidMomentum(f64),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("bad JEPA checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, JepaError>;

/// Network shapes for the encoder and predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JepaArch {
    pub chunk_len: usize,
    pub embed_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub predictor_hidden: Vec<usize>,
    pub momentum: f64,
}

impl JepaArch {
    pub fn encoder_spec(&self) -> Result<MlpSpec> {
        let mut w = vec![self.chunk_len];
        w.extend(&self.encoder_hidden);
        w.push(self.embed_dim);
        Ok(MlpSpec::new(w)?)
    }

    pub fn predictor_spec(&self) -> Result<MlpSpec> {
        let mut w = vec![self.embed_dim];
        w.extend(&self.predictor_hidden);
        w.push(self.embed_dim);
        Ok(MlpSpec::new(w)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JepaHandles {
    pub encoder_spec: MlpSpec,
    pub encoder: ParamVector,
    pub predictor_spec: MlpSpec,
    pub predictor: ParamVector,
    pub ema_target: ParamVector,
    pub momentum: f64,
}

impl JepaHandles {
    pub fn new(
        encoder_spec: MlpSpec,
        encoder: ParamVector,
        predictor_spec: MlpSpec,
        predictor: ParamVector,
        ema_target: ParamVector,
        momentum: f64,
    ) -> Result<Self> {
        if encoder.manifest() != ema_target.manifest() {
            return Err(JepaError::ManifestMismatch);
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(JepaError::InvalidMomentum(momentum));
        }
        nnkit_check(&encoder_spec, &encoder)?;
        nnkit_check(&predictor_spec, &predictor)?;
        if predictor_spec.input_width() != encoder_spec.output_width()
            || predictor_spec.output_width() != encoder_spec.output_width()
        {
            return Err(JepaError::Network(NnError::InvalidSpec(
                "predictor must map the embedding space to itself".into(),
            )));
        }
        Ok(Self {
            encoder_spec,
            encoder,
            predictor_spec,
            predictor,
            ema_target,
            momentum,
        })
    }

    /// Fresh networks; the EMA target starts as a copy of the encoder.
    pub fn init(arch: &JepaArch, seed: u64) -> Result<Self> {
        let encoder_spec = arch.encoder_spec()?;
        let predictor_spec = arch.predictor_spec()?;
        let encoder = init_params(&encoder_spec, rng::derive_seed(seed, 1, 0));
        let predictor = init_params(&predictor_spec, rng::derive_seed(seed, 2, 0));
        let ema = encoder.clone();
        Self::new(encoder_spec, encoder, predictor_spec, predictor, ema, arch.momentum)
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder_spec.output_width()
    }

    pub fn encode(&self, chunk: &[f64]) -> Result<Vec<f64>> {
        Ok(nnkit::mlp_forward(&self.encoder_spec, &self.encoder, chunk)?)
    }

    pub fn encode_target(&self, chunk: &[f64]) -> Result<Vec<f64>> {
        Ok(nnkit::mlp_forward(&self.encoder_spec, &self.ema_target, chunk)?)
    }

    pub fn predict_next(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        Ok(nnkit::mlp_forward(&self.predictor_spec, &self.predictor, embedding)?)
    }

    /// `P(E(context))`, the embedding the world model expects next.
    pub fn expected_embedding(&self, context: &[f64]) -> Result<Vec<f64>> {
        self.predict_next(&self.encode(context)?)
    }

    pub fn surprise(&self, context: &[f64], candidate: &[f64]) -> Result<f64> {
        let expected = self.expected_embedding(context)?;
        cosine_surprise(&expected, &self.encode(candidate)?)
    }

    /// Surprise and its exact gradient with respect to the candidate chunk.
    pub fn surprise_and_grad(&self, context: &[f64], candidate: &[f64]) -> Result<(f64, Vec<f64>)> {
        let expected = self.expected_embedding(context)?;
        let trace = forward_trace(&self.encoder_spec, self.encoder.values(), candidate)?;
        let (s, g_emb) = cosine_surprise_grad(&expected, trace.output())?;
        let grad = backward(&self.encoder_spec, self.encoder.values(), &trace, &g_emb, None)?;
        Ok((s, grad))
    }

    pub fn surprise_grad(&self, context: &[f64], candidate: &[f64]) -> Result<Vec<f64>> {
        self.surprise_and_grad(context, candidate).map(|(_, g)| g)
    }

    /// `ema ← m·ema + (1 − m)·online`.
    pub fn ema_update_in_place(&mut self) {
        let m = self.momentum;
        for (e, o) in self.ema_target.values_mut().iter_mut().zip(self.encoder.values()) {
            *e = m * *e + (1.0 - m) * o;
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let online = prefixed(&self.encoder, "online.");
        let ema = prefixed(&self.ema_target, "ema.");
        save_params(&dir.join("encoder.sgds"), self.encoder_spec.widths(), &online.concat(ema))?;
        save_params(&dir.join("predictor.sgds"), self.predictor_spec.widths(), &self.predictor)?;
        let sidecar = Sidecar {
            embed_dim: self.embed_dim(),
            momentum: self.momentum,
        };
        let json = serde_json::to_string(&sidecar).map_err(|e| JepaError::BadCheckpoint(e.to_string()))?;
        fs::write(dir.join("jepa.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_slice(&fs::read(dir.join("jepa.json"))?)
            .map_err(|e| JepaError::BadCheckpoint(e.to_string()))?;
        let enc = load_params(&dir.join("encoder.sgds"))?;
        let pred = load_params(&dir.join("predictor.sgds"))?;
        let encoder_spec = MlpSpec::new(enc.spec)?;
        let predictor_spec = MlpSpec::new(pred.spec)?;
        let layers = encoder_spec.manifest().len();
        if enc.params.manifest().len() != 2 * layers {
            return Err(JepaError::BadCheckpoint(
                "encoder file must hold the online and EMA tensors".into(),
            ));
        }
        let (online, ema) = enc.params.split_at_tensor(layers);
        let online = ParamVector::new(online.values().to_vec(), encoder_spec.manifest())?;
        let ema = ParamVector::new(ema.values().to_vec(), encoder_spec.manifest())?;
        if sidecar.embed_dim != encoder_spec.output_width() {
            return Err(JepaError::BadCheckpoint(format!(
                "sidecar says E={}, encoder outputs {}",
                sidecar.embed_dim,
                encoder_spec.output_width()
            )));
        }
        Self::new(encoder_spec, online, predictor_spec, pred.params, ema, sidecar.momentum)
    }
}

fn nnkit_check(spec: &MlpSpec, p: &ParamVector) -> Result<()> {
    if p.len() != spec.param_count() {
        return Err(JepaError::Network(NnError::Shape {
            what: "network parameters",
            expected: spec.param_count(),
            got: p.len(),
        }));
    }
    Ok(())
}

fn prefixed(p: &ParamVector, prefix: &str) -> ParamVector {
    let manifest = p
        .manifest()
        .iter()
        .map(|t| nnkit::TensorInfo::new(format!("{prefix}{}", t.name), t.shape.clone()))
        .collect();
    ParamVector::new(p.values().to_vec(), manifest).expect("same sizes")
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    #[serde(rename = "E")]
    embed_dim: usize,
    momentum: f64,
}

/// Returns a copy of `handles` with the EMA target advanced one step.
pub fn ema_update(handles: &JepaHandles) -> JepaHandles {
    let mut next = handles.clone();
    next.ema_update_in_place();
    next
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `1 − ⟨u, v⟩ / (‖u‖·‖v‖)`, in [0, 2].
pub fn cosine_surprise(u: &[f64], v: &[f64]) -> Result<f64> {
    let (nu, nv) = (norm(u), norm(v));
    for n in [nu, nv] {
        if !(n > 1e-12) {
            return Err(JepaError::DegenerateEmbedding(n));
        }
    }
    let cos = u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv);
    Ok((1.0 - cos).clamp(0.0, 2.0))
}

/// Surprise and its gradient with respect to `v`.
pub fn cosine_surprise_grad(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (nu, nv) = (norm(u), norm(v));
    for n in [nu, nv] {
        if !(n > 1e-12) {
            return Err(JepaError::DegenerateEmbedding(n));
        }
    }
    let cos = u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv);
    // d cos / dv = u/(‖u‖‖v‖) − cos·v/‖v‖²
    let grad = u
        .iter()
        .zip(v)
        .map(|(a, b)| -(a / (nu * nv) - cos * b / (nv * nv)))
        .collect();
    Ok(((1.0 - cos).clamp(0.0, 2.0), grad))
}

#[derive(Debug, Clone)]
pub struct JepaLoss {
    pub loss: f64,
    pub grad_encoder: Vec<f64>,
    pub grad_predictor: Vec<f64>,
}

/// Next-chunk prediction loss summed into `out`, scaled by `scale`.
/// Returns the unscaled mean-over-pairs loss of this episode.
fn accumulate_episode_loss(
    h: &JepaHandles,
    chunks: &[&[f64]],
    scale: f64,
    grad_encoder: &mut [f64],
    grad_predictor: &mut [f64],
) -> Result<f64> {
    if chunks.len() < 2 {
        return Err(JepaError::TooFewChunks(chunks.len()));
    }
    let pairs = (chunks.len() - 1) as f64;
    let e = h.embed_dim() as f64;
    let mut total = 0.0;
    for k in 0..chunks.len() - 1 {
        let enc = forward_trace(&h.encoder_spec, h.encoder.values(), chunks[k])?;
        let pred = forward_trace(&h.predictor_spec, h.predictor.values(), enc.output())?;
        let target = h.encode_target(chunks[k + 1])?;
        let diff: Vec<f64> = pred.output().iter().zip(&target).map(|(p, t)| p - t).collect();
        total += diff.iter().map(|d| d * d).sum::<f64>() / e;
        let cot: Vec<f64> = diff.iter().map(|d| 2.0 * d / (e * pairs) * scale).collect();
        let g_emb = backward(&h.predictor_spec, h.predictor.values(), &pred, &cot, Some(grad_predictor))?;
        backward(&h.encoder_spec, h.encoder.values(), &enc, &g_emb, Some(grad_encoder))?;
    }
    Ok(total / pairs)
}

/// Mean over consecutive pairs of `‖P(E(c_k)) − E_ema(c_{k+1})‖²/E`.
/// The EMA branch is a constant: it receives no gradient.
pub fn jepa_loss(h: &JepaHandles, chunks: &[FrameChunk]) -> Result<JepaLoss> {
    let views: Vec<&[f64]> = chunks.iter().map(FrameChunk::as_slice).collect();
    let mut grad_encoder = vec![0.0; h.encoder.len()];
    let mut grad_predictor = vec![0.0; h.predictor.len()];
    let loss = accumulate_episode_loss(h, &views, 1.0, &mut grad_encoder, &mut grad_predictor)?;
    Ok(JepaLoss {
        loss,
        grad_encoder,
        grad_predictor,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JepaTrainReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Adam on the online encoder and predictor, one EMA update per step.
pub fn train_jepa(
    episodes: &[Vec<FrameChunk>],
    arch: &JepaArch,
    cfg: &TrainConfig,
) -> Result<(JepaHandles, JepaTrainReport)> {
    cfg.validate().map_err(JepaError::InvalidConfig)?;
    if episodes.is_empty() {
        return Err(JepaError::EmptyDataset);
    }
    if let Some(ep) = episodes.iter().find(|e| e.len() < 2) {
        return Err(JepaError::TooFewChunks(ep.len()));
    }
    let mut h = JepaHandles::init(arch, cfg.seed)?;
    let n_enc = h.encoder.len();
    let mut opt = Adam::new(n_enc + h.predictor.len(), cfg.learning_rate);
    let mut rng = rng::seeded(rng::derive_seed(cfg.seed, 3, 0));
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let mut flat = vec![0.0; opt_len(&h)];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad_encoder = vec![0.0; n_enc];
            let mut grad_predictor = vec![0.0; h.predictor.len()];
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let views: Vec<&[f64]> = episodes[i].iter().map(FrameChunk::as_slice).collect();
                epoch_loss += accumulate_episode_loss(&h, &views, scale, &mut grad_encoder, &mut grad_predictor)?;
            }
            flat[..n_enc].copy_from_slice(h.encoder.values());
            flat[n_enc..].copy_from_slice(h.predictor.values());
            let grads: Vec<f64> = grad_encoder.into_iter().chain(grad_predictor).collect();
            opt.step(&mut flat, &grads);
            h.encoder.values_mut().copy_from_slice(&flat[..n_enc]);
            h.predictor.values_mut().copy_from_slice(&flat[n_enc..]);
            h.ema_update_in_place();
        }
        epoch_losses.push(epoch_loss / episodes.len() as f64);
    }
    Ok((h, JepaTrainReport { epoch_losses }))
}

fn opt_len(h: &JepaHandles) -> usize {
    h.encoder.len() + h.predictor.len()
}

/// Per-dimension variance of encoder embeddings over a set of chunks.
pub fn embedding_variance(h: &JepaHandles, chunks: &[FrameChunk]) -> Result<Vec<f64>> {
    let embs = chunks
        .iter()
        .map(|c| h.encode(c.as_slice()))
        .collect::<Result<Vec<_>>>()?;
    let n = embs.len().max(1) as f64;
    let e = h.embed_dim();
    let mut mean = vec![0.0; e];
    for v in &embs {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; e];
    for v in &embs {
        for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
            *s += (x - m) * (x - m) / n;
        }
    }
    Ok(var)
}
