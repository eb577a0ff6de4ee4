//! `tune`: run a grid-search protocol and export per-evaluation CSV
//! rows, a per-configuration summary JSON, and a reproduction manifest.

use crate::config::{
    config_id, fmt_compact, io_err, parse_motion, resolve_grid, write_manifest, ExperimentConfig,
    GridStyleArg, MotionArg, ProtocolArg, RegArg,
};
use serde::Serialize;
use srtune_core::acquisition::MotionLevel;
use srtune_core::solvers::RegularizerKind;
use srtune_core::stats::signedrank_test;
use srtune_core::tuner::{
    ga_sweep, tune_setting, tune_subject, Configuration, ExamDescriptor, GridSpec, Metric,
    TuneOptions, TuneResult, TuneRow,
};
use srtune_core::{Error, Result};
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

#[derive(Debug, clap::Args)]
pub struct TuneArgs {
    /// Experiment configuration JSON; replaces the individual flags
    /// (only --out may accompany it)
    #[arg(long, conflicts_with_all = [
        "protocol", "field", "series", "ga", "gas", "exam", "regularizer",
        "grid", "grid_values", "grid_default", "repeats", "size", "motion",
        "iters", "tol", "seed", "workers",
    ])]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ProtocolArg::Setting)]
    protocol: ProtocolArg,
    /// Main field strength in tesla (1.5 or 3)
    #[arg(long, default_value_t = 1.5)]
    field: f64,
    /// Series reconstructed per repeat (subset of the simulated pool)
    #[arg(long, default_value_t = 3)]
    series: usize,
    /// Gestational age in weeks
    #[arg(long, default_value_t = 30.0)]
    ga: f64,
    /// Gestational ages for the ga-sweep protocol (comma separated;
    /// defaults to 22,26,30,34)
    #[arg(long, value_delimiter = ',')]
    gas: Vec<f64>,
    /// Exam descriptor JSON for the subject protocol (its seed field is
    /// authoritative; --seed is not used)
    #[arg(long)]
    exam: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = RegArg::Tv)]
    regularizer: RegArg,
    /// Grid style (defaults to the regularizer's own style)
    #[arg(long, value_enum)]
    grid: Option<GridStyleArg>,
    /// Custom grid values (comma separated), with --grid-default
    #[arg(long, value_delimiter = ',', conflicts_with = "grid")]
    grid_values: Vec<f64>,
    /// Which custom grid value is the untuned baseline
    #[arg(long, requires = "grid_values")]
    grid_default: Option<f64>,
    /// Independent subset draws (setting and ga-sweep protocols)
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Reconstruction grid size (voxels per axis, isotropic)
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Inter-slice motion amplitude of the simulation
    #[arg(long, value_enum, default_value_t = MotionArg::Little)]
    motion: MotionArg,
    /// Solver iteration cap override
    #[arg(long)]
    iters: Option<usize>,
    /// Solver tolerance override
    #[arg(long)]
    tol: Option<f64>,
    /// Root random seed
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Worker threads (0 = all cores)
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Output directory (default: current directory)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Protocol {
    Setting,
    Subject,
    GaSweep,
}

impl Protocol {
    fn as_str(self) -> &'static str {
        match self {
            Protocol::Setting => "setting",
            Protocol::Subject => "subject",
            Protocol::GaSweep => "ga-sweep",
        }
    }
}

fn parse_protocol(s: &str) -> Result<Protocol> {
    match s {
        "setting" => Ok(Protocol::Setting),
        "subject" => Ok(Protocol::Subject),
        "ga-sweep" => Ok(Protocol::GaSweep),
        other => Err(Error::InvalidParameter(format!(
            "unknown protocol '{other}' (expected setting, subject, or ga-sweep)"
        ))),
    }
}

/// Everything needed to execute and document one tuning run.
struct ResolvedTune {
    protocol: Protocol,
    template: Configuration,
    exam: Option<ExamDescriptor>,
    ga_list: Vec<f64>,
    grid: GridSpec,
    reg: RegularizerKind,
    opts: TuneOptions,
    workers: usize,
    out: PathBuf,
}

const DEFAULT_GA_SWEEP: [f64; 4] = [22.0, 26.0, 30.0, 34.0];

fn resolve(args: TuneArgs) -> Result<ResolvedTune> {
    if let Some(config_path) = &args.config {
        let text = fs::read_to_string(config_path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        let protocol = parse_protocol(&cfg.protocol)?;
        let reg = RegularizerKind::from_str(&cfg.regularizer)?;
        let grid = resolve_grid(cfg.grid.as_ref(), reg)?;
        let exam = match (&cfg.exam, protocol) {
            (Some(path), Protocol::Subject) => {
                let resolved = if path.is_relative() {
                    config_path.parent().unwrap_or_else(|| std::path::Path::new(".")).join(path)
                } else {
                    path.clone()
                };
                Some(ExamDescriptor::from_json_str(&fs::read_to_string(resolved)?)?)
            }
            (Some(_), _) => {
                return Err(Error::InvalidParameter(
                    "an exam descriptor only applies to the subject protocol".into(),
                ))
            }
            (None, Protocol::Subject) => {
                return Err(Error::InvalidParameter(
                    "the subject protocol needs an exam descriptor".into(),
                ))
            }
            (None, _) => None,
        };
        let mut template = Configuration::new(cfg.field_strength, cfg.n_series, cfg.ga_weeks, cfg.seed);
        template.repeats = cfg.repeats;
        let out = match (&args.out, &cfg.output_dir) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => o.clone(),
            (None, None) => PathBuf::from("."),
        };
        Ok(ResolvedTune {
            protocol,
            template,
            exam,
            ga_list: cfg.ga_list.clone().unwrap_or_else(|| DEFAULT_GA_SWEEP.to_vec()),
            grid,
            reg,
            opts: TuneOptions {
                hr_dim: cfg.hr_dim,
                motion: parse_motion(&cfg.motion)?,
                max_iters: cfg.max_iters,
                tol: cfg.tol,
            },
            workers: cfg.workers,
            out,
        })
    } else {
        let protocol = match args.protocol {
            ProtocolArg::Setting => Protocol::Setting,
            ProtocolArg::Subject => Protocol::Subject,
            ProtocolArg::GaSweep => Protocol::GaSweep,
        };
        let reg = args.regularizer.kind();
        let grid = if !args.grid_values.is_empty() {
            let default = args.grid_default.ok_or_else(|| {
                Error::InvalidParameter("--grid-values needs --grid-default".into())
            })?;
            GridSpec::custom(args.grid_values.clone(), default)?
        } else {
            match args.grid {
                Some(GridStyleArg::Tv) => GridSpec::tv_style(),
                Some(GridStyleArg::Tikhonov) => GridSpec::tikhonov_style(),
                None => GridSpec::for_regularizer(reg),
            }
        };
        let exam = match (&args.exam, protocol) {
            (Some(path), Protocol::Subject) => {
                Some(ExamDescriptor::from_json_str(&fs::read_to_string(path)?)?)
            }
            (Some(_), _) => {
                return Err(Error::InvalidParameter(
                    "--exam only applies to --protocol subject".into(),
                ))
            }
            (None, Protocol::Subject) => {
                return Err(Error::InvalidParameter(
                    "--protocol subject needs --exam <descriptor.json>".into(),
                ))
            }
            (None, _) => None,
        };
        let mut template = Configuration::new(args.field, args.series, args.ga, args.seed);
        template.repeats = args.repeats;
        Ok(ResolvedTune {
            protocol,
            template,
            exam,
            ga_list: if args.gas.is_empty() { DEFAULT_GA_SWEEP.to_vec() } else { args.gas.clone() },
            grid,
            reg,
            opts: TuneOptions {
                hr_dim: args.size,
                motion: args.motion.level(),
                max_iters: args.iters,
                tol: args.tol,
            },
            workers: args.workers,
            out: args.out.clone().unwrap_or_else(|| PathBuf::from(".")),
        })
    }
}

/// One executed grid search plus the identifiers its CSV rows carry.
struct RunOutput {
    config_id: String,
    field_strength: f64,
    n_series: usize,
    ga_weeks: f64,
    result: TuneResult,
}

fn execute(r: &ResolvedTune) -> Result<Vec<RunOutput>> {
    match r.protocol {
        Protocol::Setting => {
            let result = tune_setting(&r.template, &r.grid, r.reg, &r.opts)?;
            Ok(vec![RunOutput {
                config_id: config_id(
                    r.template.field_strength,
                    r.template.n_series,
                    r.template.ga_weeks,
                ),
                field_strength: r.template.field_strength,
                n_series: r.template.n_series,
                ga_weeks: r.template.ga_weeks,
                result,
            }])
        }
        Protocol::Subject => {
            let exam = r.exam.as_ref().expect("resolve() guarantees an exam");
            let result = tune_subject(exam, &r.grid, r.reg, &r.opts)?;
            Ok(vec![RunOutput {
                config_id: format!(
                    "exam-{}",
                    config_id(exam.field_strength, exam.series.len(), exam.ga_weeks)
                ),
                field_strength: exam.field_strength,
                n_series: exam.series.len(),
                ga_weeks: exam.ga_weeks,
                result,
            }])
        }
        Protocol::GaSweep => {
            let results = ga_sweep(&r.ga_list, &r.template, &r.grid, r.reg, &r.opts)?;
            Ok(results
                .into_iter()
                .map(|(ga, result)| RunOutput {
                    config_id: config_id(r.template.field_strength, r.template.n_series, ga),
                    field_strength: r.template.field_strength,
                    n_series: r.template.n_series,
                    ga_weeks: ga,
                    result,
                })
                .collect())
        }
    }
}

/// Documented CSV row schema (stable column order).
#[derive(Serialize)]
struct CsvRow<'a> {
    config_id: &'a str,
    field_strength: f64,
    n_series: usize,
    ga_weeks: f64,
    regularizer: &'a str,
    alpha: f64,
    repeat: usize,
    psnr_db: f64,
    ssim: f64,
}

#[derive(Serialize)]
struct Gains {
    psnr_db: Option<f64>,
    ssim: Option<f64>,
}

#[derive(Serialize)]
struct PValues {
    psnr_db: Option<f64>,
    ssim: Option<f64>,
}

#[derive(Serialize)]
struct Summary<'a> {
    config_id: &'a str,
    regularizer: &'a str,
    alpha_star_psnr: f64,
    alpha_star_ssim: f64,
    default_alpha: f64,
    gains: Gains,
    p_values: PValues,
}

/// Signed-rank p-value of "tuned vs default" paired over repeats; `None`
/// when the pairing is impossible, 1.0 when tuned == default.
pub(crate) fn paired_p_value(
    rows: &[TuneRow],
    alpha_star: f64,
    alpha_default: f64,
    metric: Metric,
) -> Option<f64> {
    if alpha_star == alpha_default {
        return Some(1.0);
    }
    let collect = |alpha: f64| -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = rows
            .iter()
            .filter(|row| row.alpha == alpha)
            .map(|row| {
                let m = match metric {
                    Metric::Psnr => row.psnr_db,
                    Metric::Ssim => row.ssim,
                };
                (row.repeat, m)
            })
            .collect();
        v.sort_by_key(|&(repeat, _)| repeat);
        v
    };
    let tuned = collect(alpha_star);
    let default = collect(alpha_default);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for &(repeat, value) in &tuned {
        if let Some(&(_, d)) = default.iter().find(|&&(rep, _)| rep == repeat) {
            a.push(value);
            b.push(d);
        }
    }
    if a.is_empty() {
        return None;
    }
    signedrank_test(&a, &b).ok().map(|t| t.p_value)
}

fn summarize<'a>(run: &'a RunOutput, reg: RegularizerKind) -> Summary<'a> {
    let result = &run.result;
    Summary {
        config_id: &run.config_id,
        regularizer: reg.as_str(),
        alpha_star_psnr: result.alpha_star_psnr,
        alpha_star_ssim: result.alpha_star_ssim,
        default_alpha: result.grid.default_alpha,
        gains: Gains {
            psnr_db: result.gain(Metric::Psnr),
            ssim: result.gain(Metric::Ssim),
        },
        p_values: PValues {
            psnr_db: paired_p_value(
                &result.rows,
                result.alpha_star_psnr,
                result.grid.default_alpha,
                Metric::Psnr,
            ),
            ssim: paired_p_value(
                &result.rows,
                result.alpha_star_ssim,
                result.grid.default_alpha,
                Metric::Ssim,
            ),
        },
    }
}

#[derive(Serialize)]
struct TuneManifest<'a> {
    protocol: &'a str,
    regularizer: &'a str,
    grid_values: &'a [f64],
    grid_default_alpha: f64,
    hr_dim: usize,
    motion: MotionLevel,
    #[serde(skip_serializing_if = "Option::is_none")]
    field_strength: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_series: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ga_weeks: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    repeats: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ga_list: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    exam: Option<&'a ExamDescriptor>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tol: Option<f64>,
    seed: u64,
}

fn write_outputs(r: &ResolvedTune, runs: &[RunOutput]) -> Result<()> {
    // rows.csv
    let csv_path = r.out.join("rows.csv");
    let mut wtr = csv::Writer::from_path(&csv_path).map_err(io_err)?;
    let mut n_rows = 0usize;
    for run in runs {
        for row in &run.result.rows {
            wtr.serialize(CsvRow {
                config_id: &run.config_id,
                field_strength: run.field_strength,
                n_series: run.n_series,
                ga_weeks: run.ga_weeks,
                regularizer: r.reg.as_str(),
                alpha: row.alpha,
                repeat: row.repeat,
                psnr_db: row.psnr_db,
                ssim: row.ssim,
            })
            .map_err(io_err)?;
            n_rows += 1;
        }
    }
    wtr.flush()?;

    // per-configuration summaries
    for run in runs {
        let summary = summarize(run, r.reg);
        let name = if runs.len() == 1 {
            "summary.json".to_string()
        } else {
            format!("summary-ga{}.json", fmt_compact(run.ga_weeks))
        };
        fs::write(r.out.join(&name), serde_json::to_string_pretty(&summary)? + "\n")?;
        println!(
            "{}: alpha_star_psnr={} alpha_star_ssim={} (default {})",
            run.config_id,
            summary.alpha_star_psnr,
            summary.alpha_star_ssim,
            summary.default_alpha
        );
    }

    // reproduction manifest
    let is_subject = r.protocol == Protocol::Subject;
    let is_sweep = r.protocol == Protocol::GaSweep;
    let manifest = TuneManifest {
        protocol: r.protocol.as_str(),
        regularizer: r.reg.as_str(),
        grid_values: &r.grid.values,
        grid_default_alpha: r.grid.default_alpha,
        hr_dim: r.opts.hr_dim,
        motion: r.opts.motion,
        field_strength: (!is_subject).then_some(r.template.field_strength),
        n_series: (!is_subject).then_some(r.template.n_series),
        ga_weeks: (!is_subject && !is_sweep).then_some(r.template.ga_weeks),
        repeats: (!is_subject).then_some(r.template.repeats),
        ga_list: is_sweep.then_some(r.ga_list.as_slice()),
        exam: r.exam.as_ref(),
        max_iters: r.opts.max_iters,
        tol: r.opts.tol,
        seed: if is_subject { r.exam.as_ref().map(|e| e.seed).unwrap_or(0) } else { r.template.seed },
    };
    write_manifest(&r.out.join("manifest.json"), "tune", &manifest)?;

    println!("wrote {} rows to {}", n_rows, csv_path.display());
    Ok(())
}

pub fn run(args: TuneArgs) -> Result<()> {
    let resolved = resolve(args)?;
    if resolved.workers > 0 {
        // ignore the error: the global pool may already exist in-process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(resolved.workers).build_global();
    }
    fs::create_dir_all(&resolved.out)?;
    let runs = execute(&resolved)?;
    write_outputs(&resolved, &runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(alpha: f64, repeat: usize, psnr: f64, ssim: f64) -> TuneRow {
        TuneRow { alpha, repeat, psnr_db: psnr, ssim }
    }

    #[test]
    fn test_paired_p_value_basics() {
        let rows = vec![
            row(0.1, 0, 30.0, 0.90),
            row(0.1, 1, 31.0, 0.91),
            row(0.1, 2, 32.0, 0.92),
            row(0.5, 0, 33.0, 0.95),
            row(0.5, 1, 34.0, 0.96),
            row(0.5, 2, 35.0, 0.97),
        ];
        // tuned == default → nothing to test
        assert_eq!(paired_p_value(&rows, 0.1, 0.1, Metric::Psnr), Some(1.0));
        // all three differences positive → exact two-sided p = 2/8
        let p = paired_p_value(&rows, 0.5, 0.1, Metric::Psnr).unwrap();
        assert!((p - 0.25).abs() < 1e-12, "p = {p}");
        // missing default rows → no pairing
        assert_eq!(paired_p_value(&rows, 0.5, 0.9, Metric::Ssim), None);
    }
}
