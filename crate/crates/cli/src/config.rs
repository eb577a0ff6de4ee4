//! Shared plumbing: argument enums, the experiment configuration file,
//! grid resolution, manifests, and small formatting helpers.

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use srtune_core::acquisition::MotionLevel;
use srtune_core::solvers::RegularizerKind;
use srtune_core::tuner::GridSpec;
use srtune_core::{Error, Result};
use std::path::{Path, PathBuf};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Wrap any error as an I/O error (for csv and similar foreign errors).
pub fn io_err<E>(e: E) -> Error
where
    E: Into<Box<dyn std::error::Error + Send + Sync>>,
{
    Error::Io(std::io::Error::other(e))
}

// -- clap value enums ----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegArg {
    Tv,
    Tikhonov,
}

impl RegArg {
    pub fn kind(self) -> RegularizerKind {
        match self {
            RegArg::Tv => RegularizerKind::TotalVariation,
            RegArg::Tikhonov => RegularizerKind::FirstOrderTikhonov,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MotionArg {
    None,
    Little,
    Moderate,
}

impl MotionArg {
    pub fn level(self) -> MotionLevel {
        match self {
            MotionArg::None => MotionLevel::None,
            MotionArg::Little => MotionLevel::Little,
            MotionArg::Moderate => MotionLevel::Moderate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    /// Grid search per acquisition setting: one phantom, repeated
    /// orientation-balanced subsets of a simulated series pool
    Setting,
    /// Grid search for one described exam (single repeat)
    Subject,
    /// The setting protocol once per gestational age
    GaSweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GridStyleArg {
    /// Reciprocal grid, default weight 4/3
    Tv,
    /// Geometric grid on [1e-3, 2] plus 0.01, default weight 0.01
    Tikhonov,
}

// -- experiment configuration file ---------------------------------------

/// Grid selection inside an experiment configuration: either a named
/// style or explicit values with a default weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridConfig {
    Style { style: String },
    Custom { values: Vec<f64>, default_alpha: f64 },
}

fn d_field() -> f64 {
    1.5
}
fn d_series() -> usize {
    3
}
fn d_ga() -> f64 {
    30.0
}
fn d_reg() -> String {
    "tv".into()
}
fn d_repeats() -> usize {
    3
}
fn d_hr_dim() -> usize {
    64
}
fn d_motion() -> String {
    "little".into()
}
fn d_seed() -> u64 {
    42
}

/// Everything `tune` needs, as a JSON file (`tune --config`). Fields
/// mirror the command-line flags; `exam` is a path resolved relative to
/// the configuration file itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: String,
    #[serde(default = "d_field")]
    pub field_strength: f64,
    #[serde(default = "d_series")]
    pub n_series: usize,
    #[serde(default = "d_ga")]
    pub ga_weeks: f64,
    #[serde(default)]
    pub ga_list: Option<Vec<f64>>,
    #[serde(default)]
    pub exam: Option<PathBuf>,
    #[serde(default = "d_reg")]
    pub regularizer: String,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default = "d_repeats")]
    pub repeats: usize,
    #[serde(default = "d_hr_dim")]
    pub hr_dim: usize,
    #[serde(default = "d_motion")]
    pub motion: String,
    #[serde(default)]
    pub max_iters: Option<usize>,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default)]
    pub workers: usize,
}

pub fn parse_motion(s: &str) -> Result<MotionLevel> {
    match s {
        "none" => Ok(MotionLevel::None),
        "little" => Ok(MotionLevel::Little),
        "moderate" => Ok(MotionLevel::Moderate),
        other => Err(Error::InvalidParameter(format!(
            "unknown motion level '{other}' (expected none, little, or moderate)"
        ))),
    }
}

pub fn resolve_grid(cfg: Option<&GridConfig>, reg: RegularizerKind) -> Result<GridSpec> {
    match cfg {
        None => Ok(GridSpec::for_regularizer(reg)),
        Some(GridConfig::Style { style }) => match style.as_str() {
            "tv" => Ok(GridSpec::tv_style()),
            "tikhonov" => Ok(GridSpec::tikhonov_style()),
            other => Err(Error::InvalidParameter(format!(
                "unknown grid style '{other}' (expected tv or tikhonov)"
            ))),
        },
        Some(GridConfig::Custom { values, default_alpha }) => {
            GridSpec::custom(values.clone(), *default_alpha)
        }
    }
}

// -- manifests ------------------------------------------------------------

/// Write a reproduction manifest: command name, tool version, and a full
/// echo of the effective configuration. Deliberately contains no
/// timestamps and no filesystem paths, so reruns of the same
/// configuration produce byte-identical manifests.
pub fn write_manifest<C: Serialize>(path: &Path, command: &str, config: &C) -> Result<()> {
    #[derive(Serialize)]
    struct Manifest<'a, C> {
        command: &'a str,
        version: &'a str,
        config: &'a C,
    }
    let text =
        serde_json::to_string_pretty(&Manifest { command, version: VERSION, config })?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

// -- formatting -----------------------------------------------------------

/// Compact float formatting for identifiers: integral values lose the
/// trailing ".0" (1.5 → "1.5", 3.0 → "3").
pub fn fmt_compact(x: f64) -> String {
    if x == x.trunc() && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// Stable identifier for an acquisition configuration.
pub fn config_id(field_strength: f64, n_series: usize, ga_weeks: f64) -> String {
    format!("{}T-{}series-ga{}", fmt_compact(field_strength), n_series, fmt_compact(ga_weeks))
}
