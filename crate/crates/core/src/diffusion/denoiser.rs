use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{check_len, DiffusionError, NoiseSchedule, Result};
use crate::nnkit::{backward, forward_trace, init_params, load_params, save_params, MlpSpec, ParamVector, TensorInfo, Trace};
use crate::rng;
use crate::worldsim::Condition;

/// Number of (sin, cos) pairs in the timestep embedding.
pub const TIME_FREQUENCIES: usize = 4;

const NULL_CONTEXT: &str = "null_context";
const COND_EMBEDDING: &str = "cond_embedding";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub chunk_frames: usize,
    pub frame_width: usize,
    pub num_conditions: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
    /// Schedule length T, used to normalize the timestep embedding.
    pub num_steps: usize,
    /// Data scale for the input/output preconditioning; `None` makes the MLP
    /// output the noise estimate directly.
    pub sigma_data: Option<f64>,
}

impl DenoiserArch {
    pub fn chunk_len(&self) -> usize {
        self.chunk_frames * self.frame_width
    }

    pub fn input_width(&self) -> usize {
        2 * self.chunk_len() + self.cond_dim + 2 * TIME_FREQUENCIES
    }

    pub fn mlp_spec(&self) -> Result<MlpSpec> {
        let mut w = vec![self.input_width()];
        w.extend(&self.hidden);
        w.push(self.chunk_len());
        Ok(MlpSpec::new(w)?)
    }

    /// MLP tensors, then the learned NULL context and the condition table
    /// (row `C` is the NULL condition).
    pub fn manifest(&self) -> Result<Vec<TensorInfo>> {
        let mut m = self.mlp_spec()?.manifest();
        m.push(TensorInfo::new(NULL_CONTEXT, vec![self.chunk_len()]));
        m.push(TensorInfo::new(COND_EMBEDDING, vec![self.num_conditions + 1, self.cond_dim]));
        Ok(m)
    }
}

/// One query of the noise predictor. `None` context and `Condition::Null`
/// select the learned NULL branches.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'a> {
    pub x_t: &'a [f64],
    pub t: usize,
    pub context: Option<&'a [f64]>,
    pub condition: Condition,
}

/// Forward record of one query, enough to run the reverse pass.
#[derive(Debug, Clone)]
pub(crate) struct DenoiserTrace {
    mlp: Trace,
    eps: Vec<f64>,
    /// `ε̂ = skip·x_t + out·F(inp·x_t, ...)`
    skip: f64,
    out: f64,
    inp: f64,
}

impl DenoiserTrace {
    pub(crate) fn output(&self) -> &[f64] {
        &self.eps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    arch: DenoiserArch,
    alpha_bars: Vec<f64>,
    spec: MlpSpec,
    params: ParamVector,
    mlp_len: usize,
    null_ctx_offset: usize,
    cond_offset: usize,
}

impl Denoiser {
    pub fn init(arch: DenoiserArch, sched: &NoiseSchedule, seed: u64) -> Result<Self> {
        let spec = arch.mlp_spec()?;
        let mlp = init_params(&spec, rng::derive_seed(seed, 11, 0));
        let mut r = rng::seeded(rng::derive_seed(seed, 12, 0));
        let extra_len = arch.chunk_len() + (arch.num_conditions + 1) * arch.cond_dim;
        let extras: Vec<f64> = (0..extra_len).map(|_| r.random_range(-1.0..1.0)).collect();
        let manifest = arch.manifest()?;
        let values = mlp.values().iter().copied().chain(extras).collect();
        Self::from_params(arch, sched, ParamVector::new(values, manifest)?)
    }

    pub fn from_params(arch: DenoiserArch, sched: &NoiseSchedule, params: ParamVector) -> Result<Self> {
        let spec = arch.mlp_spec()?;
        if sched.num_steps() != arch.num_steps {
            return Err(DiffusionError::InvalidConfig(format!(
                "architecture expects T={}, schedule has T={}",
                arch.num_steps,
                sched.num_steps()
            )));
        }
        if let Some(sd) = arch.sigma_data {
            if !(sd > 0.0 && sd.is_finite()) {
                return Err(DiffusionError::InvalidConfig(format!("sigma_data must be positive, got {sd}")));
            }
        }
        if params.manifest() != arch.manifest()?.as_slice() {
            return Err(DiffusionError::BadCheckpoint(
                "parameter manifest does not match the denoiser architecture".into(),
            ));
        }
        let mlp_len = spec.param_count();
        let null_ctx_offset = params.locate(NULL_CONTEXT).expect("manifest checked").0;
        let cond_offset = params.locate(COND_EMBEDDING).expect("manifest checked").0;
        Ok(Self {
            arch,
            alpha_bars: sched.alpha_bars().to_vec(),
            spec,
            params,
            mlp_len,
            null_ctx_offset,
            cond_offset,
        })
    }

    pub fn arch(&self) -> &DenoiserArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        self.params.values_mut()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_params(path, self.spec.widths(), &self.params)?)
    }

    pub fn load(arch: DenoiserArch, sched: &NoiseSchedule, path: &Path) -> Result<Self> {
        let ck = load_params(path)?;
        if ck.spec != arch.mlp_spec()?.widths() {
            return Err(DiffusionError::BadCheckpoint(format!(
                "checkpoint widths {:?} differ from the configured {:?}",
                ck.spec,
                arch.mlp_spec()?.widths()
            )));
        }
        Self::from_params(arch, sched, ck.params)
    }

    fn cond_row(&self, condition: Condition) -> Result<usize> {
        match condition {
            Condition::Null => Ok(self.arch.num_conditions),
            Condition::Label(k) if k < self.arch.num_conditions => Ok(k),
            Condition::Label(k) => Err(DiffusionError::UnknownCondition(k)),
        }
    }

    fn time_embedding(&self, t: usize) -> [f64; 2 * TIME_FREQUENCIES] {
        let tau = t as f64 / self.arch.num_steps as f64;
        let mut out = [0.0; 2 * TIME_FREQUENCIES];
        for k in 0..TIME_FREQUENCIES {
            let angle = tau * PI * (1u32 << k) as f64;
            out[2 * k] = angle.sin();
            out[2 * k + 1] = angle.cos();
        }
        out
    }

    /// `(skip, out, inp)` scalings at step `t`. With data scale σ_d and
    /// `V = (1 − ᾱ) + ᾱσ_d²` they are `√(1−ᾱ)/V`, `−√ᾱ·σ_d/√V` and `1/√V`,
    /// which is the usual skip/output/input preconditioning of a clean-data
    /// denoiser rewritten as a noise estimate.
    fn scalings(&self, t: usize) -> (f64, f64, f64) {
        match self.arch.sigma_data {
            None => (0.0, 1.0, 1.0),
            Some(sd) => {
                let ab = self.alpha_bars[t - 1];
                let var = (1.0 - ab) + ab * sd * sd;
                ((1.0 - ab).sqrt() / var, -ab.sqrt() * sd / var.sqrt(), 1.0 / var.sqrt())
            }
        }
    }

    /// `[inp·x_t ‖ context-or-null ‖ condition embedding ‖ timestep embedding]`
    fn assemble(&self, input: &DenoiserInput<'_>, inp: f64) -> Result<Vec<f64>> {
        let n = self.arch.chunk_len();
        let v = self.params.values();
        let context = match input.context {
            Some(c) => {
                check_len("context", n, c.len())?;
                c
            }
            None => &v[self.null_ctx_offset..self.null_ctx_offset + n],
        };
        let row = self.cond_row(input.condition)?;
        let d = self.arch.cond_dim;
        let emb = &v[self.cond_offset + row * d..self.cond_offset + (row + 1) * d];
        let mut x = Vec::with_capacity(self.arch.input_width());
        x.extend(input.x_t.iter().map(|xi| inp * xi));
        x.extend_from_slice(context);
        x.extend_from_slice(emb);
        x.extend_from_slice(&self.time_embedding(input.t));
        Ok(x)
    }

    pub(crate) fn trace(&self, input: &DenoiserInput<'_>) -> Result<DenoiserTrace> {
        check_len("x_t", self.arch.chunk_len(), input.x_t.len())?;
        if input.t == 0 || input.t > self.arch.num_steps {
            return Err(DiffusionError::TimestepOutOfRange {
                t: input.t,
                max: self.arch.num_steps,
            });
        }
        let (skip, out, inp) = self.scalings(input.t);
        let x = self.assemble(input, inp)?;
        let mlp = forward_trace(&self.spec, &self.params.values()[..self.mlp_len], &x)?;
        let eps = if self.arch.sigma_data.is_some() {
            mlp.output().iter().zip(input.x_t).map(|(f, xi)| skip * xi + out * f).collect()
        } else {
            mlp.output().to_vec()
        };
        Ok(DenoiserTrace { mlp, eps, skip, out, inp })
    }

    pub fn predict_eps(&self, input: &DenoiserInput<'_>) -> Result<Vec<f64>> {
        Ok(self.trace(input)?.eps)
    }

    /// Gradient of `⟨cotangent, ε̂⟩` with respect to `x_t`, reusing a trace.
    pub(crate) fn x_vjp(&self, trace: &DenoiserTrace, cotangent: &[f64]) -> Result<Vec<f64>> {
        let cot: Vec<f64> = cotangent.iter().map(|c| trace.out * c).collect();
        let mut g = backward(&self.spec, &self.params.values()[..self.mlp_len], &trace.mlp, &cot, None)?;
        g.truncate(self.arch.chunk_len());
        for (gi, c) in g.iter_mut().zip(cotangent) {
            *gi = trace.inp * *gi + trace.skip * c;
        }
        Ok(g)
    }

    /// Adds the gradient of `⟨cotangent, ε̂⟩` with respect to every parameter
    /// (NULL context and condition table included) into `grad`.
    pub(crate) fn accumulate_param_grad(
        &self,
        input: &DenoiserInput<'_>,
        trace: &DenoiserTrace,
        cotangent: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        check_len("parameter gradient", self.params.len(), grad.len())?;
        let cot: Vec<f64> = cotangent.iter().map(|c| trace.out * c).collect();
        let g_in = backward(
            &self.spec,
            &self.params.values()[..self.mlp_len],
            &trace.mlp,
            &cot,
            Some(&mut grad[..self.mlp_len]),
        )?;
        let n = self.arch.chunk_len();
        if input.context.is_none() {
            for (g, gi) in grad[self.null_ctx_offset..self.null_ctx_offset + n].iter_mut().zip(&g_in[n..2 * n]) {
                *g += gi;
            }
        }
        let row = self.cond_row(input.condition)?;
        let d = self.arch.cond_dim;
        let start = self.cond_offset + row * d;
        for (g, gi) in grad[start..start + d].iter_mut().zip(&g_in[2 * n..2 * n + d]) {
            *g += gi;
        }
        Ok(())
    }
}
