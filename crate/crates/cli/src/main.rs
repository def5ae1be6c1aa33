use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use sgds::gaussoracle::run_suite;
use sgds::harness::experiment::{self, eval_row_for_seed, prepare_models, run_arm, Arm, RunOptions};
use sgds::harness::report::{to_stable_json, write_timings, Timings};
use sgds::harness::{parse_config, run_experiment, write_report, ExperimentConfig, HarnessError};
use sgds::worldsim::decode_position;

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_CHECK_FAILED: u8 = 4;

#[derive(Parser)]
#[command(name = "sgds", version, about = "Surprise-guided chunkwise video diffusion on a toy physics world")]
struct Cli {
    /// Directory for cached datasets and checkpoints.
    #[arg(long, global = true, default_value = ".sgds-cache")]
    cache_dir: PathBuf,
    /// Worker threads for evaluation (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or load from cache) the denoiser and print its loss curve.
    TrainDenoiser { config: PathBuf },
    /// Train (or load from cache) the JEPA world model and print its loss curve.
    TrainJepa { config: PathBuf },
    /// Roll out one arm from the held-out episode with the given seed.
    Generate {
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        arm: Arm,
        /// Condition label; defaults to seed mod C.
        #[arg(long)]
        condition: Option<usize>,
    },
    /// Run the three-arm comparison and write report.json and summary.csv.
    Evaluate {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the composed score and sampler against the linear-Gaussian oracle.
    OracleCheck {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
    CheckFailed(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    parse_config(path).map_err(|e| Failure::Config(e.to_string()))
}

fn print_losses(name: &str, losses: &[f64], cached: bool) {
    let origin = if cached { "cache" } else { "trained" };
    println!("{name}: {} epochs ({origin})", losses.len());
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("  first epoch loss {first:.6e}");
        println!("  last epoch loss  {last:.6e}");
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let opts = RunOptions {
        cache_dir: cli.cache_dir,
    };
    match cli.command {
        Command::TrainDenoiser { config } => {
            let cfg = load(&config)?;
            let data = experiment::ensure_dataset(&cfg, &opts)?;
            let (_, losses, cached) = experiment::ensure_denoiser(&cfg, &opts, &data)?;
            print_losses("denoiser", &losses, cached);
        }
        Command::TrainJepa { config } => {
            let cfg = load(&config)?;
            let data = experiment::ensure_dataset(&cfg, &opts)?;
            let (_, losses, cached) = experiment::ensure_jepa(&cfg, &opts, &data)?;
            print_losses("jepa", &losses, cached);
        }
        Command::Generate {
            config,
            seed,
            arm,
            condition,
        } => {
            let cfg = load(&config)?;
            let cond = condition.unwrap_or(seed as usize % cfg.world.num_conditions);
            if cond >= cfg.world.num_conditions {
                return Err(Failure::Config(format!(
                    "condition {cond} out of range for {} conditions",
                    cfg.world.num_conditions
                )));
            }
            let models = prepare_models(&cfg, &opts, &mut Timings::default())?;
            let row = eval_row_for_seed(&cfg, 0, seed, cond)?;
            let out = run_arm(&cfg, &models, &row, arm)?;
            let frames: Vec<Vec<f64>> = out.chunks.iter().flat_map(|c| c.iter_frames().map(<[f64]>::to_vec)).collect();
            let positions: Vec<Option<f64>> = frames.iter().map(|f| decode_position(f).ok()).collect();
            let doc = json!({
                "seed": seed,
                "condition": cond,
                "arm": arm.name(),
                "context_fit_safe": row.fit_safe,
                "plausibility_error": out.plausibility_error,
                "mean_surprise": out.mean_surprise,
                "selected": out.selected,
                "positions": positions,
                "frames": frames,
            });
            print!("{}", to_stable_json(&doc)?);
        }
        Command::Evaluate { config, out } => {
            let cfg = load(&config)?;
            let (report, timings) = run_experiment(&cfg, &opts)?;
            write_report(&report, &out)?;
            write_timings(&timings, &out)?;
            for a in &report.arms {
                println!(
                    "arm {}: mean plausibility error {:.6e}, median {:.6e}, mean surprise {:.6e}",
                    a.arm, a.mean_plausibility_error, a.median_plausibility_error, a.mean_surprise
                );
            }
            println!("arm c wins or ties arm a on {:.1}% of rows", 100.0 * report.c_win_or_tie_rate);
            println!("total {:.1} s", timings.total_seconds);
        }
        Command::OracleCheck { config, out } => {
            let cfg = load(&config)?;
            let suite = run_suite(&cfg.oracle_config()).map_err(HarnessError::from)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("oracle.json"), to_stable_json(&suite)?)?;
            for case in &suite.cases {
                let w = case.weights;
                println!(
                    "w=({}, {}, {}) lambda={}: composition error {:.2e}, max |z| {:.2}, max var rel err {:.3}",
                    w.omega_ctx,
                    w.omega_txt,
                    w.omega_s,
                    case.lambda,
                    case.composition_max_error,
                    case.sampling.z_scores.iter().fold(0.0f64, |m, z| m.max(z.abs())),
                    case.sampling.var_rel_error.iter().fold(0.0f64, |m, r| m.max(*r)),
                );
            }
            if !suite.passed {
                return Err(Failure::CheckFailed("oracle check failed".into()));
            }
            println!("oracle check passed");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(Failure::CheckFailed(m)) => {
            eprintln!("{m}");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
    }
}
