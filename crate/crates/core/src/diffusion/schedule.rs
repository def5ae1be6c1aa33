use serde::{Deserialize, Serialize};

use super::{check_len, DiffusionError, Result};

/// Linear-β DDPM schedule. Timesteps are 1-based: `t ∈ [1, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(num_steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if num_steps == 0 {
        return Err(DiffusionError::InvalidSchedule("T must be >= 1".into()));
    }
    if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
        return Err(DiffusionError::InvalidSchedule(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let betas = (0..num_steps)
        .map(|i| {
            if num_steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (num_steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(DiffusionError::InvalidSchedule(format!(
                "betas must be non-empty and inside (0, 1): {betas:?}"
            )));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(DiffusionError::InvalidSchedule("betas must not decrease".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.betas.len() {
            return Err(DiffusionError::TimestepOutOfRange {
                t,
                max: self.betas.len(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.index(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// `x_t = √ᾱ·x0 + √(1−ᾱ)·ε`.
pub fn forward_noise(x0: &[f64], eps: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    check_len("noise", x0.len(), eps.len())?;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// `∇ log p(x_t) ≈ −ε̂ / √(1−ᾱ)`.
pub fn score_from_eps(eps: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    if !(alpha_bar < 1.0) {
        return Err(DiffusionError::DegenerateNoiseLevel);
    }
    let sd = (1.0 - alpha_bar).sqrt();
    Ok(eps.iter().map(|e| -e / sd).collect())
}

pub fn eps_from_score(score: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    if !(alpha_bar < 1.0) {
        return Err(DiffusionError::DegenerateNoiseLevel);
    }
    let sd = (1.0 - alpha_bar).sqrt();
    Ok(score.iter().map(|s| -s * sd).collect())
}

/// Posterior-mean estimate `x̂0 = (x_t − √(1−ᾱ)·ε̂)/√ᾱ`.
pub fn tweedie_x0(x_t: &[f64], eps: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    check_len("noise prediction", x_t.len(), eps.len())?;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x_t.iter().zip(eps).map(|(x, e)| (x - b * e) / a).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_examples() {
        let s = make_schedule(1, 0.02, 0.02).unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.98).abs() < 1e-15);
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2).unwrap() - 0.72).abs() < 1e-15);
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas().windows(2).all(|w| w[1] > w[0]));
        assert!((s.beta(100).unwrap() - 0.02).abs() < 1e-15);
        assert!(s.alpha_bar(0).is_err() && s.alpha_bar(101).is_err());
    }

    #[test]
    fn schedule_errors() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_noise_examples() {
        let x0 = [0.3, -0.7];
        assert_eq!(forward_noise(&x0, &[5.0, 5.0], 1.0).unwrap(), x0.to_vec());
        let y = forward_noise(&x0, &[0.0, 0.0], 0.64).unwrap();
        assert!((y[0] - 0.24).abs() < 1e-15 && (y[1] + 0.56).abs() < 1e-15);
        let z = forward_noise(&[0.0; 3], &[1.0; 3], 0.72).unwrap();
        assert!(z.iter().all(|v| (v - 0.28f64.sqrt()).abs() < 1e-15));
        assert!((z[0] - 0.5292).abs() < 1e-4);
        assert!(forward_noise(&x0, &[1.0], 0.5).is_err());
    }

    #[test]
    fn score_examples() {
        assert_eq!(score_from_eps(&[0.0; 3], 0.5).unwrap(), vec![-0.0; 3]);
        assert!(score_from_eps(&[1.0; 2], 0.75).unwrap().iter().all(|s| (s + 2.0).abs() < 1e-15));
        assert!(matches!(score_from_eps(&[1.0], 1.0), Err(DiffusionError::DegenerateNoiseLevel)));
        assert!(eps_from_score(&[0.0; 3], 0.5).unwrap().iter().all(|&e| e == 0.0));
        assert!(eps_from_score(&[-2.0; 2], 0.75).unwrap().iter().all(|e| (e - 1.0).abs() < 1e-15));
        assert!(matches!(eps_from_score(&[1.0], 1.0), Err(DiffusionError::DegenerateNoiseLevel)));
    }

    #[test]
    fn tweedie_examples() {
        let x = [0.4, -0.1];
        assert_eq!(tweedie_x0(&x, &[0.0, 0.0], 1.0).unwrap(), x.to_vec());
        let hat = tweedie_x0(&[0.9; 3], &[0.5; 3], 0.81).unwrap();
        let expected = (0.9 - 0.19f64.sqrt() * 0.5) / 0.9;
        assert!(hat.iter().all(|v| (v - expected).abs() < 1e-15));
        assert!((expected - 0.7578).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn score_eps_round_trip(
            eps in proptest::collection::vec(-5.0f64..5.0, 1..16),
            t in 1usize..=100,
        ) {
            let s = make_schedule(100, 1e-4, 0.02).unwrap();
            let ab = s.alpha_bar(t).unwrap();
            let back = eps_from_score(&score_from_eps(&eps, ab).unwrap(), ab).unwrap();
            let sc = score_from_eps(&eps_from_score(&eps, ab).unwrap(), ab).unwrap();
            for ((a, b), c) in back.iter().zip(&eps).zip(&sc) {
                prop_assert!((a - b).abs() <= 1e-12);
                prop_assert!((c - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn tweedie_inverts_forward_noise(
            x0 in proptest::collection::vec(-1.0f64..1.0, 1..16),
            seed in 0u64..1000,
            t in 1usize..=100,
        ) {
            let s = make_schedule(100, 1e-4, 0.02).unwrap();
            let ab = s.alpha_bar(t).unwrap();
            let eps = crate::rng::normal_vec(&mut crate::rng::seeded(seed), x0.len());
            let xt = forward_noise(&x0, &eps, ab).unwrap();
            let back = tweedie_x0(&xt, &eps, ab).unwrap();
            for (a, b) in back.iter().zip(&x0) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
