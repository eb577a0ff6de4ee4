//! `report`: aggregate tuning CSVs into a default-vs-tuned comparison
//! table (one row per configuration, both regularizers side by side)
//! with signed-rank p-values.

use crate::config::io_err;
use crate::tune::paired_p_value;
use serde::{Deserialize, Serialize};
use srtune_core::tuner::{GridSpec, Metric, TuneRow};
use srtune_core::{Error, Result};
use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

#[derive(Debug, clap::Args)]
pub struct ReportArgs {
    /// Tuning CSV files (rows.csv as written by `tune`)
    #[arg(required = true)]
    csv: Vec<PathBuf>,
    /// Also write the aggregate as JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

/// The documented CSV columns `report` consumes; anything else in the
/// file is ignored.
#[derive(Debug, Deserialize)]
struct RawRow {
    config_id: String,
    #[allow(dead_code)]
    field_strength: f64,
    #[allow(dead_code)]
    n_series: usize,
    #[allow(dead_code)]
    ga_weeks: f64,
    regularizer: String,
    alpha: f64,
    repeat: usize,
    psnr_db: f64,
    ssim: f64,
}

/// Per-(configuration, regularizer) aggregate cell.
#[derive(Debug, Serialize)]
struct RegSummary {
    default_alpha: f64,
    alpha_star_psnr: Option<f64>,
    alpha_star_ssim: Option<f64>,
    psnr_default: Option<f64>,
    psnr_tuned: Option<f64>,
    ssim_default: Option<f64>,
    ssim_tuned: Option<f64>,
    p_values: PValuePair,
}

#[derive(Debug, Serialize)]
struct PValuePair {
    psnr_db: Option<f64>,
    ssim: Option<f64>,
}

#[derive(Debug, Serialize)]
struct ConfigReport {
    config_id: String,
    regularizers: BTreeMap<String, RegSummary>,
}

#[derive(Debug, Serialize)]
struct Report {
    configs: Vec<ConfigReport>,
}

fn metric_of(row: &TuneRow, metric: Metric) -> f64 {
    match metric {
        Metric::Psnr => row.psnr_db,
        Metric::Ssim => row.ssim,
    }
}

fn mean_at(rows: &[TuneRow], alpha: f64, metric: Metric) -> Option<f64> {
    let vals: Vec<f64> =
        rows.iter().filter(|r| r.alpha == alpha).map(|r| metric_of(r, metric)).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Weight maximizing the mean metric; ties break toward the smaller
/// weight (same convention as the tuner's selection).
fn alpha_star(rows: &[TuneRow], metric: Metric) -> Option<f64> {
    let mut alphas: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
    alphas.sort_by(|a, b| a.partial_cmp(b).expect("finite weights"));
    alphas.dedup();
    let mut best: Option<(f64, f64)> = None;
    for &a in &alphas {
        let mean = mean_at(rows, a, metric)?;
        if best.map_or(true, |(_, m)| mean > m) {
            best = Some((a, mean));
        }
    }
    best.map(|(a, _)| a)
}

fn default_alpha_for(regularizer: &str) -> Result<f64> {
    match regularizer {
        "tv" => Ok(GridSpec::tv_style().default_alpha),
        "tikhonov" => Ok(GridSpec::tikhonov_style().default_alpha),
        other => Err(Error::InvalidParameter(format!(
            "unknown regularizer '{other}' in CSV (expected tv or tikhonov)"
        ))),
    }
}

fn summarize_group(regularizer: &str, rows: &[TuneRow]) -> Result<RegSummary> {
    let default_alpha = default_alpha_for(regularizer)?;
    let star_psnr = alpha_star(rows, Metric::Psnr);
    let star_ssim = alpha_star(rows, Metric::Ssim);
    let p = |star: Option<f64>, metric: Metric| {
        star.and_then(|s| paired_p_value(rows, s, default_alpha, metric))
    };
    Ok(RegSummary {
        default_alpha,
        alpha_star_psnr: star_psnr,
        alpha_star_ssim: star_ssim,
        psnr_default: mean_at(rows, default_alpha, Metric::Psnr),
        psnr_tuned: star_psnr.and_then(|s| mean_at(rows, s, Metric::Psnr)),
        ssim_default: mean_at(rows, default_alpha, Metric::Ssim),
        ssim_tuned: star_ssim.and_then(|s| mean_at(rows, s, Metric::Ssim)),
        p_values: PValuePair {
            psnr_db: p(star_psnr, Metric::Psnr),
            ssim: p(star_ssim, Metric::Ssim),
        },
    })
}

fn build_report(raw: &[RawRow]) -> Result<Report> {
    // config → regularizer → rows
    let mut groups: BTreeMap<&str, BTreeMap<&str, Vec<TuneRow>>> = BTreeMap::new();
    for r in raw {
        groups.entry(&r.config_id).or_default().entry(&r.regularizer).or_default().push(TuneRow {
            alpha: r.alpha,
            repeat: r.repeat,
            psnr_db: r.psnr_db,
            ssim: r.ssim,
        });
    }
    let mut configs = Vec::with_capacity(groups.len());
    for (config_id, by_reg) in &groups {
        let mut regularizers = BTreeMap::new();
        for (reg, rows) in by_reg {
            regularizers.insert(reg.to_string(), summarize_group(reg, rows)?);
        }
        configs.push(ConfigReport { config_id: config_id.to_string(), regularizers });
    }
    Ok(Report { configs })
}

fn fmt_cell(v: Option<f64>, decimals: usize) -> String {
    match v {
        Some(x) => format!("{x:.decimals$}"),
        None => "-".into(),
    }
}

fn print_report(report: &Report) {
    let id_width = report
        .configs
        .iter()
        .map(|c| c.config_id.len())
        .chain(std::iter::once("configuration".len()))
        .max()
        .unwrap_or(13);
    // 8 metric columns: per regularizer, PSNR/SSIM at the default and at
    // the tuned weight
    println!(
        "{:<id_width$}  {:>9} {:>9} {:>9} {:>9}  {:>9} {:>9} {:>9} {:>9}",
        "configuration",
        "tv",
        "tv",
        "tv",
        "tv",
        "tik",
        "tik",
        "tik",
        "tik"
    );
    println!(
        "{:<id_width$}  {:>9} {:>9} {:>9} {:>9}  {:>9} {:>9} {:>9} {:>9}",
        "",
        "psnr@def",
        "psnr@tun",
        "ssim@def",
        "ssim@tun",
        "psnr@def",
        "psnr@tun",
        "ssim@def",
        "ssim@tun"
    );
    for c in &report.configs {
        let tv = c.regularizers.get("tv");
        let tik = c.regularizers.get("tikhonov");
        let cell = |reg: Option<&RegSummary>,
                    get: fn(&RegSummary) -> Option<f64>,
                    decimals: usize| {
            fmt_cell(reg.and_then(get), decimals)
        };
        println!(
            "{:<id_width$}  {:>9} {:>9} {:>9} {:>9}  {:>9} {:>9} {:>9} {:>9}",
            c.config_id,
            cell(tv, |s| s.psnr_default, 2),
            cell(tv, |s| s.psnr_tuned, 2),
            cell(tv, |s| s.ssim_default, 4),
            cell(tv, |s| s.ssim_tuned, 4),
            cell(tik, |s| s.psnr_default, 2),
            cell(tik, |s| s.psnr_tuned, 2),
            cell(tik, |s| s.ssim_default, 4),
            cell(tik, |s| s.ssim_tuned, 4),
        );
    }
    println!();
    println!("signed-rank p-values, tuned vs default (paired over repeats):");
    for c in &report.configs {
        for (reg, s) in &c.regularizers {
            println!(
                "  {} {}: alpha*={} psnr p={}  alpha*={} ssim p={}",
                c.config_id,
                reg,
                fmt_cell(s.alpha_star_psnr, 6),
                fmt_cell(s.p_values.psnr_db, 4),
                fmt_cell(s.alpha_star_ssim, 6),
                fmt_cell(s.p_values.ssim, 4),
            );
        }
    }
}

pub fn run(args: ReportArgs) -> Result<()> {
    let mut raw = Vec::new();
    for path in &args.csv {
        let mut rdr = csv::Reader::from_path(path).map_err(io_err)?;
        for record in rdr.deserialize::<RawRow>() {
            raw.push(record.map_err(io_err)?);
        }
    }
    if raw.is_empty() {
        return Err(Error::InvalidParameter("the CSV files contain no rows".into()));
    }
    let report = build_report(&raw)?;
    print_report(&report);
    if let Some(path) = args.out {
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(())
}
