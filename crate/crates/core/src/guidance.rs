//! Composed sampling score.
//!
//! ```text
//! s = (1 − ω_ctx)·s_uncond + (ω_ctx − ω_txt)·s_ctx + ω_txt·s_full − ω_s·∇S
//! ```
//!
//! Terms with a zero coefficient are never read, so callers may leave them
//! out. That makes `(1, 1, 0)` return `s_full` bit-exactly and lets samplers
//! skip the surprise model entirely when `ω_s = 0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GuidanceError {
    #[error("score term `{0}` is required by a non-zero coefficient but was not provided")]
    MissingTerm(&'static str),
    #[error("score term `{term}` has length {got}, expected {expected}")]
    Shape {
        term: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid guidance weights: {0}")]
    InvalidWeights(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceWeights {
    pub omega_ctx: f64,
    pub omega_txt: f64,
    pub omega_s: f64,
}

impl GuidanceWeights {
    pub fn new(omega_ctx: f64, omega_txt: f64, omega_s: f64) -> Result<Self, GuidanceError> {
        let w = Self {
            omega_ctx,
            omega_txt,
            omega_s,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), GuidanceError> {
        if !(self.omega_ctx.is_finite() && self.omega_txt.is_finite() && self.omega_s.is_finite()) {
            return Err(GuidanceError::InvalidWeights(format!("non-finite weight in {self:?}")));
        }
        if self.omega_s < 0.0 {
            return Err(GuidanceError::InvalidWeights(format!(
                "omega_s must be >= 0, got {}",
                self.omega_s
            )));
        }
        Ok(())
    }

    /// The same weights with surprise guidance switched off.
    pub fn without_surprise(self) -> Self {
        Self { omega_s: 0.0, ..self }
    }
}

/// `(c_u, c_c, c_f, c_s)`; the first three always sum to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub uncond: f64,
    pub ctx: f64,
    pub full: f64,
    pub surprise: f64,
}

pub fn coefficients(w: &GuidanceWeights) -> Coefficients {
    Coefficients {
        uncond: 1.0 - w.omega_ctx,
        ctx: w.omega_ctx - w.omega_txt,
        full: w.omega_txt,
        surprise: -w.omega_s,
    }
}

/// The four vectors of the composed score. `None` marks a term that was not
/// computed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTerms {
    pub s_uncond: Option<Vec<f64>>,
    pub s_ctx: Option<Vec<f64>>,
    pub s_full: Option<Vec<f64>>,
    pub grad_surprise: Option<Vec<f64>>,
}

impl ScoreTerms {
    pub fn complete(s_uncond: Vec<f64>, s_ctx: Vec<f64>, s_full: Vec<f64>, grad_surprise: Option<Vec<f64>>) -> Self {
        Self {
            s_uncond: Some(s_uncond),
            s_ctx: Some(s_ctx),
            s_full: Some(s_full),
            grad_surprise,
        }
    }
}

pub fn compose_score(terms: &ScoreTerms, w: &GuidanceWeights) -> Result<Vec<f64>, GuidanceError> {
    w.validate()?;
    let c = coefficients(w);
    let named = [
        ("s_uncond", c.uncond, terms.s_uncond.as_deref()),
        ("s_ctx", c.ctx, terms.s_ctx.as_deref()),
        ("s_full", c.full, terms.s_full.as_deref()),
        ("grad_surprise", c.surprise, terms.grad_surprise.as_deref()),
    ];

    let mut active = Vec::with_capacity(4);
    for (name, coef, term) in named {
        if coef == 0.0 {
            continue;
        }
        let v = term.ok_or(GuidanceError::MissingTerm(name))?;
        active.push((name, coef, v));
    }
    let len = match active.first() {
        Some((_, _, v)) => v.len(),
        // Only reachable when every coefficient vanishes, which the
        // sum-to-one identity rules out.
        None => return Err(GuidanceError::MissingTerm("s_full")),
    };
    for (name, _, v) in &active {
        if v.len() != len {
            return Err(GuidanceError::Shape {
                term: name,
                expected: len,
                got: v.len(),
            });
        }
    }

    // A lone unit coefficient is a copy, not a multiply-add.
    if let [(_, coef, v)] = active.as_slice() {
        if *coef == 1.0 {
            return Ok(v.to_vec());
        }
    }
    let mut out = vec![0.0; len];
    for (_, coef, v) in active {
        for (o, x) in out.iter_mut().zip(v) {
            *o += coef * x;
        }
    }
    Ok(out)
}
