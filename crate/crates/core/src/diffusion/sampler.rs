use serde::{Deserialize, Serialize};

use super::denoiser::DenoiserTrace;
use super::{
    check_len, eps_from_score, score_from_eps, tweedie_x0, Denoiser, DenoiserInput, DiffusionError,
    NoiseSchedule, Result,
};
use crate::guidance::{coefficients, compose_score, GuidanceWeights, ScoreTerms};
use crate::jepa::{JepaError, JepaHandles};
use crate::rng::{self, Rng};
use crate::worldsim::{Condition, FrameChunk};

/// Anything that can score a candidate chunk against its context and return
/// the gradient of that score with respect to the candidate.
pub trait SurpriseModel: Sync {
    fn surprise(&self, context: &[f64], candidate: &[f64]) -> std::result::Result<f64, JepaError>;
    fn surprise_grad(&self, context: &[f64], candidate: &[f64]) -> std::result::Result<Vec<f64>, JepaError>;
}

impl SurpriseModel for JepaHandles {
    fn surprise(&self, context: &[f64], candidate: &[f64]) -> std::result::Result<f64, JepaError> {
        JepaHandles::surprise(self, context, candidate)
    }

    fn surprise_grad(&self, context: &[f64], candidate: &[f64]) -> std::result::Result<Vec<f64>, JepaError> {
        JepaHandles::surprise_grad(self, context, candidate)
    }
}

/// Where the surprise gradient is evaluated during sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurpriseInput {
    /// At the Tweedie estimate x̂0(x_t), chained back through the denoiser.
    X0hat,
    /// Directly at the noisy sample.
    Xt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub weights: GuidanceWeights,
    pub surprise_input: SurpriseInput,
    /// Surprise guidance is applied only at steps `t <= guidance_start_step`.
    pub guidance_start_step: usize,
}

impl SamplerConfig {
    pub fn new(weights: GuidanceWeights, num_steps: usize) -> Self {
        Self {
            weights,
            surprise_input: SurpriseInput::X0hat,
            guidance_start_step: num_steps,
        }
    }
}

/// DDPM ancestral update
/// `x_{t−1} = (x_t − β_t/√(1−ᾱ_t)·ε)/√α_t + √β_t·z`, with `z = 0` at `t = 1`.
pub fn sample_step(x_t: &[f64], eps: &[f64], t: usize, sched: &NoiseSchedule, rng: &mut Rng) -> Result<Vec<f64>> {
    check_len("composed noise", x_t.len(), eps.len())?;
    let beta = sched.beta(t)?;
    let alpha = sched.alpha(t)?;
    let alpha_bar = sched.alpha_bar(t)?;
    let k = beta / (1.0 - alpha_bar).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mut out: Vec<f64> = x_t.iter().zip(eps).map(|(x, e)| (x - k * e) * inv).collect();
    if t > 1 {
        let sigma = beta.sqrt();
        for o in out.iter_mut() {
            *o += sigma * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, rng);
        }
    }
    Ok(out)
}

/// Full reverse loop for one chunk under the composed score.
pub fn generate_chunk(
    denoiser: &Denoiser,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    context: &[f64],
    condition: Condition,
    surprise: Option<&dyn SurpriseModel>,
    rng: &mut Rng,
) -> Result<FrameChunk> {
    let arch = denoiser.arch();
    let n = arch.chunk_len();
    check_len("context chunk", n, context.len())?;
    cfg.weights.validate()?;
    let coef = coefficients(&cfg.weights);
    let surprise = if cfg.weights.omega_s > 0.0 {
        Some(surprise.ok_or(DiffusionError::MissingSurpriseModel)?)
    } else {
        None
    };

    let mut x = rng::normal_vec(rng, n);
    for t in (1..=sched.num_steps()).rev() {
        let alpha_bar = sched.alpha_bar(t)?;
        fn query<'a>(x_t: &'a [f64], t: usize, context: Option<&'a [f64]>, condition: Condition) -> DenoiserInput<'a> {
            DenoiserInput { x_t, t, context, condition }
        }
        let guide = surprise.filter(|_| t <= cfg.guidance_start_step);
        let need_full_trace = guide.is_some() && cfg.surprise_input == SurpriseInput::X0hat;

        let mut terms = ScoreTerms::default();
        if coef.uncond != 0.0 {
            let eps = denoiser.predict_eps(&query(&x, t, None, Condition::Null))?;
            terms.s_uncond = Some(score_from_eps(&eps, alpha_bar)?);
        }
        if coef.ctx != 0.0 {
            let eps = denoiser.predict_eps(&query(&x, t, Some(context), Condition::Null))?;
            terms.s_ctx = Some(score_from_eps(&eps, alpha_bar)?);
        }
        let full_trace = if coef.full != 0.0 || need_full_trace {
            Some(denoiser.trace(&query(&x, t, Some(context), condition))?)
        } else {
            None
        };
        if coef.full != 0.0 {
            let eps = full_trace.as_ref().expect("computed above").output();
            terms.s_full = Some(score_from_eps(eps, alpha_bar)?);
        }
        if let Some(model) = guide {
            terms.grad_surprise = Some(match cfg.surprise_input {
                SurpriseInput::Xt => model.surprise_grad(context, &x)?,
                SurpriseInput::X0hat => {
                    let trace = full_trace.as_ref().expect("computed above");
                    surprise_grad_through_tweedie(denoiser, trace, &x, alpha_bar, model, context)?
                }
            });
        }
        let step_weights = if guide.is_some() { cfg.weights } else { cfg.weights.without_surprise() };
        let score = compose_score(&terms, &step_weights)?;
        let eps = eps_from_score(&score, alpha_bar)?;
        x = sample_step(&x, &eps, t, sched, rng)?;
    }
    Ok(FrameChunk::from_flat(arch.chunk_frames, arch.frame_width, x))
}

/// `∇_{x_t} S(x̂0(x_t)) = (g − √(1−ᾱ)·J_εᵀ g)/√ᾱ` with `g = ∇S(x̂0)`, where
/// `x̂0` is the Tweedie estimate from the traced noise prediction.
pub(crate) fn surprise_grad_through_tweedie(
    denoiser: &Denoiser,
    trace: &DenoiserTrace,
    x_t: &[f64],
    alpha_bar: f64,
    model: &dyn SurpriseModel,
    context: &[f64],
) -> Result<Vec<f64>> {
    let x0 = tweedie_x0(x_t, trace.output(), alpha_bar)?;
    let g = model.surprise_grad(context, &x0)?;
    let jt_g = denoiser.x_vjp(trace, &g)?;
    let (sd, ra) = ((1.0 - alpha_bar).sqrt(), alpha_bar.sqrt());
    Ok(g.iter().zip(&jt_g).map(|(gi, ji)| (gi - sd * ji) / ra).collect())
}

/// Autoregressive rollout: each generated chunk is the next chunk's context.
/// Returns the generated chunks only.
pub fn generate_sequence(
    denoiser: &Denoiser,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    seed_context: &FrameChunk,
    condition: Condition,
    num_chunks: usize,
    surprise: Option<&dyn SurpriseModel>,
    rng: &mut Rng,
) -> Result<Vec<FrameChunk>> {
    generate_sequence_observed(denoiser, sched, cfg, seed_context, condition, num_chunks, surprise, rng, &mut |_, _, _| {})
}

/// [`generate_sequence`] with a hook called as `(k, context, chunk)` after
/// each chunk is produced.
#[allow(clippy::too_many_arguments)]
pub fn generate_sequence_observed(
    denoiser: &Denoiser,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    seed_context: &FrameChunk,
    condition: Condition,
    num_chunks: usize,
    surprise: Option<&dyn SurpriseModel>,
    rng: &mut Rng,
    observer: &mut dyn FnMut(usize, &FrameChunk, &FrameChunk),
) -> Result<Vec<FrameChunk>> {
    if num_chunks == 0 {
        return Err(DiffusionError::InvalidConfig("num_chunks must be >= 1".into()));
    }
    let mut out: Vec<FrameChunk> = Vec::with_capacity(num_chunks);
    for k in 0..num_chunks {
        let context = out.last().unwrap_or(seed_context);
        let chunk = generate_chunk(denoiser, sched, cfg, context.as_slice(), condition, surprise, rng)?;
        observer(k, context, &chunk);
        out.push(chunk);
    }
    Ok(out)
}
