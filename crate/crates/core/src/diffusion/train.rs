use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{forward_noise, Denoiser, DenoiserArch, DenoiserInput, DiffusionError, NoiseSchedule, Result, TrainConfig};
use crate::nnkit::Adam;
use crate::rng::{self, Rng};
use crate::worldsim::{Condition, FrameChunk};

/// A clean target chunk with the chunk that preceded it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub context: Vec<f64>,
    pub target: Vec<f64>,
    pub condition: usize,
}

/// Consecutive `(chunk k, chunk k+1)` pairs of every episode.
pub fn pairs_from_episodes(episodes: &[(usize, Vec<FrameChunk>)]) -> Vec<TrainPair> {
    episodes
        .iter()
        .flat_map(|(cond, chunks)| {
            chunks.windows(2).map(move |w| TrainPair {
                context: w[0].data.clone(),
                target: w[1].data.clone(),
                condition: *cond,
            })
        })
        .collect()
}

/// Denoising score matching on one batch.
///
/// Per item: `t ~ U{1..T}`, `ε ~ N(0, I)`, then the context is replaced by
/// NULL with probability `dropout_ctx` and the condition with probability
/// `dropout_txt`. Loss is `‖ε̂ − ε‖²/(F·D)` averaged over the batch.
pub fn dsm_loss(
    denoiser: &Denoiser,
    sched: &NoiseSchedule,
    batch: &[TrainPair],
    dropout_ctx: f64,
    dropout_txt: f64,
    rng: &mut Rng,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; denoiser.params().len()];
    let loss = dsm_accumulate(denoiser, sched, batch, dropout_ctx, dropout_txt, rng, &mut grad)?;
    Ok((loss, grad))
}

fn dsm_accumulate(
    denoiser: &Denoiser,
    sched: &NoiseSchedule,
    batch: &[TrainPair],
    dropout_ctx: f64,
    dropout_txt: f64,
    rng: &mut Rng,
    grad: &mut [f64],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    let n = denoiser.arch().chunk_len();
    let scale = 1.0 / (n as f64 * batch.len() as f64);
    let mut eps = vec![0.0; n];
    let mut total = 0.0;
    for item in batch {
        let t = rng.random_range(1..=sched.num_steps());
        rng::fill_normal(rng, &mut eps);
        let drop_ctx = rng.random_bool(dropout_ctx);
        let drop_txt = rng.random_bool(dropout_txt);
        let x_t = forward_noise(&item.target, &eps, sched.alpha_bar(t)?)?;
        let input = DenoiserInput {
            x_t: &x_t,
            t,
            context: (!drop_ctx).then_some(item.context.as_slice()),
            condition: if drop_txt {
                Condition::Null
            } else {
                Condition::Label(item.condition)
            },
        };
        let trace = denoiser.trace(&input)?;
        let diff: Vec<f64> = trace.output().iter().zip(&eps).map(|(p, e)| p - e).collect();
        total += diff.iter().map(|d| d * d).sum::<f64>() / n as f64;
        let cot: Vec<f64> = diff.iter().map(|d| 2.0 * d * scale).collect();
        denoiser.accumulate_param_grad(&input, &trace, &cot, grad)?;
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserTrainReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Adam (β1 = 0.9, β2 = 0.999, ε = 1e-8) over shuffled minibatches.
/// Deterministic in `(pairs, arch, cfg)`.
pub fn train_denoiser(
    pairs: &[TrainPair],
    arch: DenoiserArch,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(Denoiser, DenoiserTrainReport)> {
    cfg.validate().map_err(DiffusionError::InvalidConfig)?;
    if pairs.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    if arch.num_steps != sched.num_steps() {
        return Err(DiffusionError::InvalidConfig(format!(
            "architecture expects T={}, schedule has T={}",
            arch.num_steps,
            sched.num_steps()
        )));
    }
    let mut denoiser = Denoiser::init(arch, sched, cfg.seed)?;
    let mut opt = Adam::new(denoiser.params().len(), cfg.learning_rate);
    let mut rng = rng::seeded(rng::derive_seed(cfg.seed, 13, 0));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut grad = vec![0.0; denoiser.params().len()];
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| pairs[i].clone()));
            grad.iter_mut().for_each(|g| *g = 0.0);
            loss_sum += dsm_accumulate(&denoiser, sched, &batch, cfg.dropout_ctx, cfg.dropout_txt, &mut rng, &mut grad)?;
            batches += 1;
            opt.step(denoiser.params_mut(), &grad);
        }
        epoch_losses.push(loss_sum / batches as f64);
    }
    Ok((denoiser, DenoiserTrainReport { epoch_losses }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::nnkit::grad_check;
    use crate::worldsim::{chunk_episode, make_episode, WorldConfig};

    fn tiny_arch() -> DenoiserArch {
        DenoiserArch {
            chunk_frames: 2,
            frame_width: 3,
            num_conditions: 2,
            cond_dim: 2,
            hidden: vec![5],
            num_steps: 10,
            sigma_data: None,
        }
    }

    fn tiny_batch() -> Vec<TrainPair> {
        vec![
            TrainPair {
                context: vec![0.1, -0.4, 0.3, 0.9, -1.0, 0.2],
                target: vec![-0.5, 0.5, 0.0, 0.7, -0.3, 0.8],
                condition: 0,
            },
            TrainPair {
                context: vec![0.0, 0.2, -0.2, 0.4, 0.6, -0.8],
                target: vec![0.3, 0.3, -0.9, 0.1, 0.0, -0.6],
                condition: 1,
            },
        ]
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let sched = make_schedule(10, 1e-3, 0.2).unwrap();
        let batch = tiny_batch();
        for arch in [tiny_arch(), DenoiserArch { sigma_data: Some(0.7), ..tiny_arch() }] {
            let den = Denoiser::init(arch, &sched, 7).unwrap();
            // Dropout 0.5 so NULL vectors and condition rows all get
            // exercised across seeds.
            for seed in 0..6 {
                let rng0 = rng::seeded(seed);
                let f = |p: &[f64]| {
                    let mut d = den.clone();
                    d.params_mut().copy_from_slice(p);
                    dsm_loss(&d, &sched, &batch, 0.5, 0.5, &mut rng0.clone()).unwrap()
                };
                let err = grad_check(f, den.params().values(), 1e-5);
                assert!(err <= 1e-5, "seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn untrained_loss_is_near_one() {
        let world = WorldConfig::default();
        let episodes: Vec<_> = (0..20)
            .map(|s| (0, chunk_episode(&make_episode(&world, s, Condition::Label(0), 8).unwrap(), 4)))
            .collect();
        let pairs = pairs_from_episodes(&episodes);
        let arch = DenoiserArch {
            chunk_frames: 4,
            frame_width: 32,
            num_conditions: 2,
            cond_dim: 8,
            hidden: vec![64],
            num_steps: 100,
            sigma_data: None,
        };
        let sched = make_schedule(100, 1e-4, 0.02).unwrap();
        let den = Denoiser::init(arch, &sched, 1).unwrap();
        let (loss, _) = dsm_loss(&den, &sched, &pairs, 0.1, 0.1, &mut rng::seeded(3)).unwrap();
        assert!((0.5..=1.5).contains(&loss), "{loss}");
    }

    #[test]
    fn empty_batch_is_an_error() {
        let sched = make_schedule(10, 1e-3, 0.2).unwrap();
        let den = Denoiser::init(tiny_arch(), &sched, 7).unwrap();
        assert!(matches!(
            dsm_loss(&den, &sched, &[], 0.1, 0.1, &mut rng::seeded(0)),
            Err(DiffusionError::EmptyDataset)
        ));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let sched = make_schedule(10, 1e-3, 0.2).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 2,
            learning_rate: 1e-3,
            dropout_ctx: 0.1,
            dropout_txt: 0.1,
            seed: 9,
        };
        let (den, report) = train_denoiser(&tiny_batch(), tiny_arch(), &sched, &cfg).unwrap();
        assert_eq!(den, Denoiser::init(tiny_arch(), &sched, 9).unwrap());
        assert!(report.epoch_losses.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let world = WorldConfig::default();
        let episodes: Vec<_> = (0..40)
            .map(|s| {
                let c = (s % 2) as usize;
                (c, chunk_episode(&make_episode(&world, s, Condition::Label(c), 12).unwrap(), 4))
            })
            .collect();
        let pairs = pairs_from_episodes(&episodes);
        assert_eq!(pairs.len(), 80);
        let arch = DenoiserArch {
            chunk_frames: 4,
            frame_width: 32,
            num_conditions: 2,
            cond_dim: 4,
            hidden: vec![48],
            num_steps: 50,
            sigma_data: Some(0.5),
        };
        let sched = make_schedule(50, 1e-4, 0.2).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 2e-3,
            dropout_ctx: 0.1,
            dropout_txt: 0.1,
            seed: 4,
        };
        let (a, rep) = train_denoiser(&pairs, arch.clone(), &sched, &cfg).unwrap();
        let (b, _) = train_denoiser(&pairs, arch, &sched, &cfg).unwrap();
        assert_eq!(a, b);
        let first = rep.epoch_losses[0];
        let last = *rep.epoch_losses.last().unwrap();
        assert!(last < first, "{first} -> {last}");
    }
}
