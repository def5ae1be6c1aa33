//! Report types and byte-stable serialization.
//!
//! Every real number is written as `{:.8e}` (9 significant digits) through a
//! custom JSON formatter, and reports are normalized through one write/parse
//! cycle before they are returned, so the in-memory [`Report`] equals what a
//! reader gets back from `report.json`.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use super::config::ExperimentConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub description: String,
    pub mean_plausibility_error: f64,
    pub median_plausibility_error: f64,
    pub mean_surprise: f64,
    pub n_conditions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRow {
    pub plausibility_error: f64,
    /// Mean over generated chunks of the surprise given the preceding chunk.
    pub mean_surprise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowReport {
    pub index: usize,
    pub seed: u64,
    pub condition: usize,
    pub a: ArmRow,
    pub b: ArmRow,
    pub c: ArmRow,
    /// Candidate picked by Best-of-N in arm c.
    pub c_selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub denoiser_epoch_losses: Vec<f64>,
    pub jepa_epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JepaSanity {
    pub n_episodes: usize,
    /// Mean surprise of the true next chunk given the context chunk.
    pub truth_surprise: f64,
    /// Same, with the frames of the true next chunk shuffled.
    pub shuffled_surprise: f64,
    /// Per-dimension encoder embedding variance over held-out chunks.
    pub embedding_variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub training: TrainingSummary,
    pub jepa_sanity: JepaSanity,
    pub arms: Vec<ArmSummary>,
    /// Fraction of rows where arm c's plausibility error is at most arm a's.
    pub c_win_or_tie_rate: f64,
    pub rows: Vec<RowReport>,
}

/// Wall-clock timings, kept out of `report.json` so that file is a pure
/// function of the configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub data_seconds: f64,
    pub denoiser_seconds: f64,
    pub jepa_seconds: f64,
    pub eval_seconds: f64,
    pub total_seconds: f64,
    pub denoiser_from_cache: bool,
    pub jepa_from_cache: bool,
}

impl Report {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == name)
    }
}

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

/// Pretty JSON with every float written to 9 significant digits.
struct FixedFloats<'a>(PrettyFormatter<'a>);

impl Formatter for FixedFloats<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            write!(w, "{value:.8e}")
        } else {
            w.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_stable_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedFloats(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

/// Rounds every float in `value` to 9 significant digits.
pub fn normalize<T: Serialize + for<'de> Deserialize<'de>>(value: &T) -> serde_json::Result<T> {
    serde_json::from_str(&to_stable_json(value)?)
}

pub fn summary_csv(report: &Report) -> String {
    let mut out = String::from("arm,mean_plausibility_error,median_plausibility_error,mean_surprise,n_conditions\n");
    for a in &report.arms {
        out.push_str(&format!(
            "{},{:.8e},{:.8e},{:.8e},{}\n",
            a.arm, a.mean_plausibility_error, a.median_plausibility_error, a.mean_surprise, a.n_conditions
        ));
    }
    out
}

/// Writes `report.json` and `summary.csv` into `out_dir`, creating it if needed.
pub fn write_report(report: &Report, out_dir: &Path) -> io::Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.json"), to_stable_json(report)?)?;
    fs::write(out_dir.join("summary.csv"), summary_csv(report))?;
    Ok(())
}

pub fn write_timings(timings: &Timings, out_dir: &Path) -> io::Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("timings.json"), to_stable_json(timings)?)
}

pub fn read_report(path: &Path) -> io::Result<Report> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
