//! Training (with a checksummed cache) and the three-arm evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::report::{
    mean, median, normalize, version_string, ArmRow, ArmSummary, JepaSanity, Report, RowReport, Timings,
    TrainingSummary,
};
use super::{HarnessError, Result};
use crate::bon::{average_surprise, generate_candidates, select_best};
use crate::diffusion::{
    generate_sequence, make_schedule, pairs_from_episodes, train_denoiser, Denoiser, DiffusionError, NoiseSchedule,
    SamplerConfig, SurpriseModel,
};
use crate::jepa::{embedding_variance, train_jepa, JepaHandles};
use crate::rng;
use crate::worldsim::{
    chunk_episode, context_is_fit_safe, make_episode, plausibility_error, read_dataset, simulate, write_dataset,
    Condition, Dataset, DatasetHeader, FrameChunk,
};

const TAG_TRAIN: u64 = 1;
const TAG_EVAL: u64 = 2;
const TAG_SHUFFLE: u64 = 3;

/// Where trained artifacts are cached between runs.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub cache_dir: PathBuf,
}

#[derive(Serialize)]
struct DataKey<'a> {
    kind: &'static str,
    seed: u64,
    world: &'a crate::worldsim::WorldConfig,
    data: &'a super::config::DataConfig,
}

#[derive(Serialize)]
struct ModelKey<'a, A: Serialize, T: Serialize> {
    kind: &'static str,
    data: String,
    arch: A,
    schedule: Option<&'a super::config::ScheduleConfig>,
    train: T,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_of<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("keys serialize"))
}

pub fn data_hash(cfg: &ExperimentConfig) -> String {
    hash_of(&DataKey {
        kind: "data",
        seed: cfg.seed,
        world: &cfg.world,
        data: &cfg.data,
    })
}

pub fn denoiser_hash(cfg: &ExperimentConfig) -> String {
    hash_of(&ModelKey {
        kind: "denoiser",
        data: data_hash(cfg),
        arch: cfg.denoiser_arch(),
        schedule: Some(&cfg.schedule),
        train: &cfg.denoiser.train,
    })
}

pub fn jepa_hash(cfg: &ExperimentConfig) -> String {
    hash_of(&ModelKey {
        kind: "jepa",
        data: data_hash(cfg),
        arch: cfg.jepa_arch(),
        schedule: None,
        train: &cfg.jepa.train,
    })
}

/// Hash of the full configuration, echoed in the report.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    hash_of(cfg)
}

/// Sidecar written last into every cache entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub config_hash: String,
    /// File name to SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
    pub epoch_losses: Vec<f64>,
}

fn entry_dir(cache_dir: &Path, kind: &str, hash: &str) -> PathBuf {
    cache_dir.join(format!("{kind}-{}", &hash[..16]))
}

fn list_files(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            list_files(&path, base, out)?;
        } else if path.file_name().is_some_and(|n| n != "meta.json") {
            out.push(path.strip_prefix(base).expect("under base").to_path_buf());
        }
    }
    Ok(())
}

fn seal_entry(dir: &Path, config_hash: &str, epoch_losses: Vec<f64>) -> Result<()> {
    let mut names = Vec::new();
    list_files(dir, dir, &mut names)?;
    names.sort();
    let mut files = BTreeMap::new();
    for name in names {
        let key = name.to_string_lossy().replace('\\', "/");
        files.insert(key, sha256_hex(&fs::read(dir.join(&name))?));
    }
    let meta = CacheMeta {
        config_hash: config_hash.to_string(),
        files,
        epoch_losses,
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// Reads and verifies a sealed entry. `Ok(None)` means "not cached yet".
pub fn open_entry(dir: &Path, config_hash: &str) -> Result<Option<CacheMeta>> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Ok(None);
    }
    let meta: CacheMeta = serde_json::from_slice(&fs::read(&meta_path)?)?;
    if meta.config_hash != config_hash {
        return Err(HarnessError::CacheMismatch {
            dir: dir.display().to_string(),
            expected: config_hash.to_string(),
            found: meta.config_hash,
        });
    }
    for (name, digest) in &meta.files {
        let bytes = fs::read(dir.join(name)).map_err(|_| HarnessError::CacheChecksum(dir.join(name).display().to_string()))?;
        if &sha256_hex(&bytes) != digest {
            return Err(HarnessError::CacheChecksum(dir.join(name).display().to_string()));
        }
    }
    Ok(Some(meta))
}

fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let frames = cfg.data.episode_chunks * cfg.world.chunk_frames;
    let episodes = (0..cfg.data.train_episodes)
        .map(|k| {
            let cond = Condition::Label(k % cfg.world.num_conditions);
            make_episode(&cfg.world, rng::derive_seed(cfg.seed, TAG_TRAIN, k as u64), cond, frames)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Dataset {
        header: DatasetHeader {
            frame_width: cfg.world.frame_width,
            chunk_frames: cfg.world.chunk_frames,
            num_conditions: cfg.world.num_conditions,
        },
        episodes,
    })
}

/// Training set as stored on disk (f32 pixels), generating it on first use.
pub fn ensure_dataset(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Dataset> {
    let hash = data_hash(cfg);
    let dir = entry_dir(&opts.cache_dir, "data", &hash);
    if open_entry(&dir, &hash)?.is_none() {
        fresh_dir(&dir)?;
        write_dataset(&dir.join("episodes.sgds"), &build_dataset(cfg)?)?;
        seal_entry(&dir, &hash, Vec::new())?;
    }
    Ok(read_dataset(&dir.join("episodes.sgds"))?)
}

fn chunked(cfg: &ExperimentConfig, data: &Dataset) -> Vec<(usize, Vec<FrameChunk>)> {
    data.episodes
        .iter()
        .map(|ep| (ep.condition, chunk_episode(ep, cfg.world.chunk_frames)))
        .collect()
}

pub fn schedule(cfg: &ExperimentConfig) -> Result<NoiseSchedule> {
    Ok(make_schedule(cfg.schedule.num_steps, cfg.schedule.beta_min, cfg.schedule.beta_max)?)
}

/// The trained denoiser as reloaded from its f32 checkpoint, with its loss curve.
pub fn ensure_denoiser(cfg: &ExperimentConfig, opts: &RunOptions, data: &Dataset) -> Result<(Denoiser, Vec<f64>, bool)> {
    let hash = denoiser_hash(cfg);
    let dir = entry_dir(&opts.cache_dir, "denoiser", &hash);
    let (meta, cached) = match open_entry(&dir, &hash)? {
        Some(meta) => (meta, true),
        None => {
            let pairs = pairs_from_episodes(&chunked(cfg, data));
            let (den, rep) = train_denoiser(&pairs, cfg.denoiser_arch(), &schedule(cfg)?, &cfg.denoiser.train)?;
            fresh_dir(&dir)?;
            den.save(&dir.join("denoiser.sgds"))?;
            seal_entry(&dir, &hash, rep.epoch_losses)?;
            (open_entry(&dir, &hash)?.expect("just sealed"), false)
        }
    };
    let den = Denoiser::load(cfg.denoiser_arch(), &schedule(cfg)?, &dir.join("denoiser.sgds"))?;
    Ok((den, meta.epoch_losses, cached))
}

pub fn ensure_jepa(cfg: &ExperimentConfig, opts: &RunOptions, data: &Dataset) -> Result<(JepaHandles, Vec<f64>, bool)> {
    let hash = jepa_hash(cfg);
    let dir = entry_dir(&opts.cache_dir, "jepa", &hash);
    let (meta, cached) = match open_entry(&dir, &hash)? {
        Some(meta) => (meta, true),
        None => {
            let episodes: Vec<Vec<FrameChunk>> = chunked(cfg, data).into_iter().map(|(_, c)| c).collect();
            let (h, rep) = train_jepa(&episodes, &cfg.jepa_arch(), &cfg.jepa.train)?;
            fresh_dir(&dir)?;
            h.save(&dir)?;
            seal_entry(&dir, &hash, rep.epoch_losses)?;
            (open_entry(&dir, &hash)?.expect("just sealed"), false)
        }
    };
    Ok((JepaHandles::load(&dir)?, meta.epoch_losses, cached))
}

/// Everything evaluation needs.
pub struct Models {
    pub denoiser: Denoiser,
    pub jepa: JepaHandles,
    pub schedule: NoiseSchedule,
    pub denoiser_losses: Vec<f64>,
    pub jepa_losses: Vec<f64>,
}

pub fn prepare_models(cfg: &ExperimentConfig, opts: &RunOptions, timings: &mut Timings) -> Result<Models> {
    cfg.validate()?;
    let start = Instant::now();
    let data = ensure_dataset(cfg, opts)?;
    timings.data_seconds = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let (denoiser, denoiser_losses, cached) = ensure_denoiser(cfg, opts, &data)?;
    timings.denoiser_seconds = start.elapsed().as_secs_f64();
    timings.denoiser_from_cache = cached;
    let start = Instant::now();
    let (jepa, jepa_losses, cached) = ensure_jepa(cfg, opts, &data)?;
    timings.jepa_seconds = start.elapsed().as_secs_f64();
    timings.jepa_from_cache = cached;
    Ok(Models {
        denoiser,
        jepa,
        schedule: schedule(cfg)?,
        denoiser_losses,
        jepa_losses,
    })
}

/// A held-out evaluation episode: real context followed by the true continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub index: usize,
    pub seed: u64,
    pub condition: usize,
    /// All real context frames; the plausibility fit uses the last two.
    pub context_frames: Vec<Vec<f64>>,
    /// The most recent real chunk, which conditions generation.
    pub context: FrameChunk,
    pub truth: Vec<FrameChunk>,
    pub fit_safe: bool,
}

pub fn eval_row_for_seed(cfg: &ExperimentConfig, index: usize, seed: u64, condition: usize) -> Result<EvalRow> {
    let f = cfg.world.chunk_frames;
    let ctx_frames = cfg.eval.context_chunks * f;
    let total = ctx_frames + cfg.eval.horizon_chunks * f;
    let cond = Condition::Label(condition);
    let (states, contacts) = simulate(seed, cond, total)?;
    let ep = make_episode(&cfg.world, seed, cond, total)?;
    let chunks = chunk_episode(&ep, f);
    Ok(EvalRow {
        index,
        seed,
        condition,
        context_frames: ep.frames[..ctx_frames].to_vec(),
        context: chunks[cfg.eval.context_chunks - 1].clone(),
        truth: chunks[cfg.eval.context_chunks..].to_vec(),
        fit_safe: context_is_fit_safe(&cfg.world, &states, &contacts, ctx_frames),
    })
}

/// Held-out rows: condition `i mod C`, seeds drawn from a stream disjoint
/// from training, skipping contexts whose last two frames are not fit-safe.
pub fn eval_rows(cfg: &ExperimentConfig) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::with_capacity(cfg.eval.num_conditions);
    let mut k = 0u64;
    for i in 0..cfg.eval.num_conditions {
        loop {
            let seed = rng::derive_seed(cfg.seed, TAG_EVAL, k);
            k += 1;
            let row = eval_row_for_seed(cfg, i, seed, i % cfg.world.num_conditions)?;
            if row.fit_safe {
                rows.push(row);
                break;
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    /// Context and text guidance only, one sample.
    A,
    /// Surprise guidance, one sample.
    B,
    /// Surprise guidance with Best-of-N selection.
    C,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::A => "a",
            Arm::B => "b",
            Arm::C => "c",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Arm::A => "vanilla: surprise weight 0, N=1",
            Arm::B => "guided: surprise weight > 0, N=1",
            Arm::C => "guided + Best-of-N",
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "a" => Ok(Arm::A),
            "b" => Ok(Arm::B),
            "c" => Ok(Arm::C),
            other => Err(format!("unknown arm {other:?}, expected a, b or c")),
        }
    }
}

/// Output of one arm on one row.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmOutput {
    pub chunks: Vec<FrameChunk>,
    pub plausibility_error: f64,
    pub mean_surprise: f64,
    /// Best-of-N index (always 0 for single-sample arms).
    pub selected: usize,
}

fn sampler_config(cfg: &ExperimentConfig, guided: bool) -> SamplerConfig {
    let weights = if guided {
        cfg.guidance.weights
    } else {
        cfg.guidance.weights.without_surprise()
    };
    SamplerConfig {
        weights,
        surprise_input: cfg.guidance.surprise_input,
        guidance_start_step: cfg.guidance.start_step,
    }
}

fn row_plausibility(row: &EvalRow, chunks: &[FrameChunk]) -> Result<f64> {
    let generated: Vec<Vec<f64>> = chunks.iter().flat_map(|c| c.iter_frames().map(<[f64]>::to_vec)).collect();
    Ok(plausibility_error(&generated, &row.context_frames, Condition::Label(row.condition))?)
}

/// Guided Best-of-N pool for a row. Candidate `i` uses `stream(row.seed, i)`.
fn candidate_pool(cfg: &ExperimentConfig, m: &Models, row: &EvalRow, n: usize, guided: bool) -> Result<crate::bon::CandidateSet> {
    let sampler = sampler_config(cfg, guided);
    let cond = Condition::Label(row.condition);
    let surprise: Option<&dyn SurpriseModel> = if guided { Some(&m.jepa) } else { None };
    let set = generate_candidates(
        n,
        &row.context,
        |r| generate_sequence(&m.denoiser, &m.schedule, &sampler, &row.context, cond, cfg.eval.horizon_chunks, surprise, r),
        |ctx, chunk| m.jepa.surprise(ctx.as_slice(), chunk.as_slice()).map_err(DiffusionError::Surprise),
        row.seed,
    )?;
    Ok(set)
}

fn pick(row: &EvalRow, set: &crate::bon::CandidateSet, i: usize) -> Result<ArmOutput> {
    Ok(ArmOutput {
        plausibility_error: row_plausibility(row, &set.candidates[i])?,
        mean_surprise: average_surprise(set, i),
        chunks: set.candidates[i].clone(),
        selected: i,
    })
}

pub fn run_arm(cfg: &ExperimentConfig, m: &Models, row: &EvalRow, arm: Arm) -> Result<ArmOutput> {
    match arm {
        Arm::A => pick(row, &candidate_pool(cfg, m, row, 1, false)?, 0),
        Arm::B => pick(row, &candidate_pool(cfg, m, row, 1, true)?, 0),
        Arm::C => {
            let set = candidate_pool(cfg, m, row, cfg.bon_n, true)?;
            pick(row, &set, select_best(&set))
        }
    }
}

/// All three arms on one row. Arm b is candidate 0 of arm c's pool, which is
/// the sample arm b would draw on its own.
pub fn evaluate_row(cfg: &ExperimentConfig, m: &Models, row: &EvalRow) -> Result<RowReport> {
    let a = pick(row, &candidate_pool(cfg, m, row, 1, false)?, 0)?;
    let pool = candidate_pool(cfg, m, row, cfg.bon_n, true)?;
    let b = pick(row, &pool, 0)?;
    let c = pick(row, &pool, select_best(&pool))?;
    let arm_row = |o: &ArmOutput| ArmRow {
        plausibility_error: o.plausibility_error,
        mean_surprise: o.mean_surprise,
    };
    Ok(RowReport {
        index: row.index,
        seed: row.seed,
        condition: row.condition,
        a: arm_row(&a),
        b: arm_row(&b),
        c: arm_row(&c),
        c_selected: c.selected,
    })
}

/// Frames of `chunk` in a seeded order that differs from the original.
pub fn shuffle_frames(chunk: &FrameChunk, seed: u64) -> FrameChunk {
    let mut order: Vec<usize> = (0..chunk.frames).collect();
    if chunk.frames > 1 {
        let mut r = rng::seeded(seed);
        while order.iter().enumerate().all(|(i, &j)| i == j) {
            order.shuffle(&mut r);
        }
    }
    let frames: Vec<Vec<f64>> = order.iter().map(|&i| chunk.frame(i).to_vec()).collect();
    FrameChunk::from_frames(&frames)
}

pub fn jepa_sanity(cfg: &ExperimentConfig, jepa: &JepaHandles, rows: &[EvalRow]) -> Result<JepaSanity> {
    let mut truth = Vec::with_capacity(rows.len());
    let mut shuffled = Vec::with_capacity(rows.len());
    for row in rows {
        let next = &row.truth[0];
        truth.push(jepa.surprise(row.context.as_slice(), next.as_slice())?);
        let mixed = shuffle_frames(next, rng::derive_seed(cfg.seed, TAG_SHUFFLE, row.index as u64));
        shuffled.push(jepa.surprise(row.context.as_slice(), mixed.as_slice())?);
    }
    let held_out: Vec<FrameChunk> = rows.iter().flat_map(|r| r.truth.iter().cloned()).collect();
    Ok(JepaSanity {
        n_episodes: rows.len(),
        truth_surprise: mean(&truth),
        shuffled_surprise: mean(&shuffled),
        embedding_variance: embedding_variance(jepa, &held_out)?,
    })
}

pub fn assemble_report(cfg: &ExperimentConfig, m: &Models, rows: &[EvalRow], results: Vec<RowReport>) -> Result<Report> {
    let summary = |arm: Arm, get: fn(&RowReport) -> &ArmRow| {
        let errs: Vec<f64> = results.iter().map(|r| get(r).plausibility_error).collect();
        let surp: Vec<f64> = results.iter().map(|r| get(r).mean_surprise).collect();
        ArmSummary {
            arm: arm.name().to_string(),
            description: arm.description().to_string(),
            mean_plausibility_error: mean(&errs),
            median_plausibility_error: median(&errs),
            mean_surprise: mean(&surp),
            n_conditions: results.len(),
        }
    };
    let arms = vec![
        summary(Arm::A, |r| &r.a),
        summary(Arm::B, |r| &r.b),
        summary(Arm::C, |r| &r.c),
    ];
    let wins = results
        .iter()
        .filter(|r| r.c.plausibility_error <= r.a.plausibility_error)
        .count();
    let report = Report {
        version: version_string(),
        config_hash: config_hash(cfg),
        config: cfg.clone(),
        training: TrainingSummary {
            denoiser_epoch_losses: m.denoiser_losses.clone(),
            jepa_epoch_losses: m.jepa_losses.clone(),
        },
        jepa_sanity: jepa_sanity(cfg, &m.jepa, rows)?,
        arms,
        c_win_or_tie_rate: wins as f64 / results.len() as f64,
        rows: results,
    };
    Ok(normalize(&report)?)
}

/// Trains or loads the models, evaluates every row with all three arms and
/// returns the normalized report together with wall-clock timings.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<(Report, Timings)> {
    let total = Instant::now();
    let mut timings = Timings::default();
    let models = prepare_models(cfg, opts, &mut timings)?;
    let start = Instant::now();
    let rows = eval_rows(cfg)?;
    let results = rows
        .par_iter()
        .map(|row| evaluate_row(cfg, &models, row))
        .collect::<Result<Vec<_>>>()?;
    let report = assemble_report(cfg, &models, &rows, results)?;
    timings.eval_seconds = start.elapsed().as_secs_f64();
    timings.total_seconds = total.elapsed().as_secs_f64();
    Ok((report, timings))
}
