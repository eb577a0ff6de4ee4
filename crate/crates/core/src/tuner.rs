//! Grid search for the regularization weight.
//!
//! Two protocols are provided. The setting-wise protocol simulates a
//! fixed pool of nine series (three per anatomical orientation) for one
//! phantom, then repeatedly reconstructs random orientation-balanced
//! subsets at every grid value. The subject-wise protocol simulates
//! exactly the series listed in an exam descriptor (count, orientation,
//! motion amplitude, gestational age) and runs the grid once.
//!
//! The selected weight maximizes the mean metric over repeats; ties are
//! broken toward the smaller (weaker) weight.

use crate::acquisition::{
    simulate_lr_series_with, simulate_series_set, stack_slices, LRSeries, MotionLevel,
    SimulateOptions,
};
use crate::error::{Error, Result};
use crate::evaluation::compare_reconstructions;
use crate::forward::{build_operator, ForwardOperator, PSFSpec};
use crate::geometry::{Orientation, Volume3D};
use crate::phantom::{generate_phantom, hr_grid, render_signal, SequenceParams, TissueTable};
use crate::solvers::{reconstruct, RegularizerKind, SolverConfig};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Seed-stream namespace for per-repeat series subset draws.
const TAG_SUBSET: u64 = 3;
/// Seed-stream namespace for per-gestational-age phantom seeds.
const TAG_GA: u64 = 4;

/// Series simulated per orientation for the setting-wise protocol.
pub const SERIES_PER_ORIENTATION: usize = 3;
/// Total simulated series pool for the setting-wise protocol.
pub const SIMULATED_SERIES_TOTAL: usize = 3 * SERIES_PER_ORIENTATION;

// ---------------------------------------------------------------------
// grids
// ---------------------------------------------------------------------

/// Named families of search grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridKind {
    /// Eight reciprocal values, default 4/3.
    TvStyle,
    /// Ten geometric values on [1e-3, 2] plus the default 0.01.
    TikhonovStyle,
    Custom,
}

/// An ordered search grid of regularization weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Strictly increasing, deduplicated positive weights.
    pub values: Vec<f64>,
    /// Reference weight; always a member of `values`.
    pub default_alpha: f64,
    pub kind: GridKind,
}

impl GridSpec {
    /// The reciprocal grid used with the total-variation solver:
    /// `alpha in {1/5, 1/3.5, 1/3, 1/2.5, 1/2, 1/1.5, 1/1, 1/0.75}`,
    /// default `1/0.75 = 4/3`.
    pub fn tv_style() -> Self {
        let denominators = [5.0, 3.5, 3.0, 2.5, 2.0, 1.5, 1.0, 0.75];
        let mut values: Vec<f64> = denominators.iter().map(|d| 1.0 / d).collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Self { values, default_alpha: 1.0 / 0.75, kind: GridKind::TvStyle }
    }

    /// The geometric grid used with the Tikhonov solver: ten values from
    /// 1e-3 to 2 at constant ratio `2000^(1/9)`, plus the default 0.01.
    pub fn tikhonov_style() -> Self {
        let lo: f64 = 1e-3;
        let hi: f64 = 2.0;
        let ratio = (hi / lo).powf(1.0 / 9.0);
        let mut values: Vec<f64> = (0..10).map(|i| lo * ratio.powi(i)).collect();
        values[9] = hi; // pin the endpoint against rounding drift
        values.push(0.01);
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Self { values, default_alpha: 0.01, kind: GridKind::TikhonovStyle }
    }

    /// A caller-supplied grid. Values are sorted and deduplicated; the
    /// default is inserted when missing.
    pub fn custom(mut values: Vec<f64>, default_alpha: f64) -> Result<Self> {
        values.push(default_alpha);
        if values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "grid values must be positive finite numbers".into(),
            ));
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        values.dedup();
        Ok(Self { values, default_alpha, kind: GridKind::Custom })
    }

    /// The grid conventionally paired with `kind`'s regularizer.
    pub fn for_regularizer(kind: RegularizerKind) -> Self {
        match kind {
            RegularizerKind::TotalVariation => Self::tv_style(),
            RegularizerKind::FirstOrderTikhonov => Self::tikhonov_style(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidParameter("grid is empty".into()));
        }
        if self.values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter("grid values must be positive".into()));
        }
        if self.values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter("grid values must be strictly increasing".into()));
        }
        if !self.values.contains(&self.default_alpha) {
            return Err(Error::InvalidParameter(format!(
                "default weight {} is not in the grid",
                self.default_alpha
            )));
        }
        Ok(())
    }
}

/// Construct one of the named grids.
pub fn make_grid(kind: GridKind) -> Result<GridSpec> {
    match kind {
        GridKind::TvStyle => Ok(GridSpec::tv_style()),
        GridKind::TikhonovStyle => Ok(GridSpec::tikhonov_style()),
        GridKind::Custom => Err(Error::InvalidParameter(
            "custom grids are built with GridSpec::custom".into(),
        )),
    }
}

// ---------------------------------------------------------------------
// configurations and results
// ---------------------------------------------------------------------

/// One setting-wise tuning configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub field_strength: f64,
    /// Series reconstructed per repeat (subset of the 9 simulated).
    pub n_series: usize,
    pub ga_weeks: f64,
    /// Independent subset draws (default 3).
    pub repeats: usize,
    pub seed: u64,
}

impl Configuration {
    pub fn new(field_strength: f64, n_series: usize, ga_weeks: f64, seed: u64) -> Self {
        Self { field_strength, n_series, ga_weeks, repeats: 3, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_series == 0 || self.n_series > SIMULATED_SERIES_TOTAL {
            return Err(Error::InvalidParameter(format!(
                "n_series must be in 1..={SIMULATED_SERIES_TOTAL}, got {}",
                self.n_series
            )));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidParameter("repeats must be at least 1".into()));
        }
        Ok(())
    }
}

/// Options shared by the tuning entry points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOptions {
    /// Isotropic reconstruction grid size (voxels per axis).
    pub hr_dim: usize,
    /// Motion amplitude for the setting-wise simulation pool.
    pub motion: MotionLevel,
    /// Override the solver's default iteration cap.
    pub max_iters: Option<usize>,
    /// Override the solver's default tolerance.
    pub tol: Option<f64>,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self { hr_dim: 64, motion: MotionLevel::Little, max_iters: None, tol: None }
    }
}

impl TuneOptions {
    fn solver_config(&self, reg: RegularizerKind, alpha: f64) -> SolverConfig {
        let mut cfg = SolverConfig::for_kind(reg, alpha);
        if let Some(n) = self.max_iters {
            cfg.max_iters = n;
        }
        if let Some(t) = self.tol {
            cfg.tol = t;
        }
        cfg
    }
}

/// Metric to optimize when selecting a weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Psnr,
    Ssim,
}

/// One grid evaluation: weight, repeat id, and both metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub alpha: f64,
    pub repeat: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// What produced a tuning result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "lowercase")]
pub enum TuneSource {
    Setting(Configuration),
    Subject(ExamDescriptor),
}

/// Full outcome of a grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub rows: Vec<TuneRow>,
    pub alpha_star_psnr: f64,
    pub alpha_star_ssim: f64,
    pub grid: GridSpec,
    pub regularizer: RegularizerKind,
    pub source: TuneSource,
}

impl TuneResult {
    /// Mean of `metric` over repeats at the given weight.
    pub fn mean_metric(&self, alpha: f64, metric: Metric) -> Option<f64> {
        let (sum, count) = self
            .rows
            .iter()
            .filter(|r| r.alpha == alpha)
            .fold((0.0, 0usize), |(s, c), r| {
                let v = match metric {
                    Metric::Psnr => r.psnr_db,
                    Metric::Ssim => r.ssim,
                };
                (s + v, c + 1)
            });
        if count == 0 {
            None
        } else {
            Some(sum / count as f64)
        }
    }

    /// Mean gain of the tuned weight over the default, per metric.
    pub fn gain(&self, metric: Metric) -> Option<f64> {
        let star = match metric {
            Metric::Psnr => self.alpha_star_psnr,
            Metric::Ssim => self.alpha_star_ssim,
        };
        Some(self.mean_metric(star, metric)? - self.mean_metric(self.grid.default_alpha, metric)?)
    }
}

/// Weight maximizing the mean metric over repeats; ties break toward the
/// smaller weight.
pub fn select_alpha(rows: &[TuneRow], grid: &GridSpec, metric: Metric) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::InvalidParameter("no rows to select from".into()));
    }
    let mut best_alpha = None;
    let mut best_mean = f64::NEG_INFINITY;
    for &alpha in &grid.values {
        let (sum, count) = rows
            .iter()
            .filter(|r| r.alpha == alpha)
            .fold((0.0, 0usize), |(s, c), r| {
                let v = match metric {
                    Metric::Psnr => r.psnr_db,
                    Metric::Ssim => r.ssim,
                };
                (s + v, c + 1)
            });
        if count == 0 {
            continue;
        }
        let mean = sum / count as f64;
        if mean > best_mean {
            best_mean = mean;
            best_alpha = Some(alpha);
        }
    }
    best_alpha.ok_or_else(|| Error::InvalidParameter("rows cover no grid value".into()))
}

// ---------------------------------------------------------------------
// setting-wise protocol
// ---------------------------------------------------------------------

/// Pick an orientation-balanced subset of the simulated pool. Counts are
/// split as evenly as possible across the three orientations (extras go
/// to randomly chosen orientations), and the series within an
/// orientation are drawn without replacement.
fn pick_subset(pool: &[LRSeries], n_series: usize, seed: u64) -> Vec<usize> {
    let mut rng = crate::seeds::stream_rng(seed, &[TAG_SUBSET]);
    let base = n_series / 3;
    let extra = n_series % 3;
    let mut orient_counts = [base; 3];
    let mut orient_ids = [0usize, 1, 2];
    orient_ids.shuffle(&mut rng);
    for &o in orient_ids.iter().take(extra) {
        orient_counts[o] += 1;
    }
    let mut picked = Vec::with_capacity(n_series);
    for (o, orientation) in Orientation::ALL.iter().enumerate() {
        let mut members: Vec<usize> = pool
            .iter()
            .enumerate()
            .filter(|(_, s)| s.orientation == *orientation)
            .map(|(i, _)| i)
            .collect();
        members.shuffle(&mut rng);
        picked.extend(members.into_iter().take(orient_counts[o]));
    }
    picked.sort_unstable();
    picked
}

/// Everything needed to run grids against one simulated acquisition.
struct PreparedCase {
    op: ForwardOperator,
    data: Vec<f64>,
    reference: Volume3D,
}

impl PreparedCase {
    fn evaluate(
        &self,
        reg: RegularizerKind,
        cfg: &SolverConfig,
        repeat: usize,
    ) -> Result<TuneRow> {
        let rep = reconstruct(&self.op, &self.data, reg, cfg).map_err(|e| match e {
            Error::Divergence(msg) => Error::Divergence(format!(
                "weight {} repeat {repeat}: {msg}",
                cfg.alpha
            )),
            other => other,
        })?;
        let metrics = compare_reconstructions(&self.reference, &rep.x, None)?;
        Ok(TuneRow { alpha: cfg.alpha, repeat, psnr_db: metrics.psnr_db, ssim: metrics.ssim })
    }
}

/// Phantom, rendered reference, and the simulated series pool for one
/// setting-wise configuration.
fn prepare_setting(
    config: &Configuration,
    opts: &TuneOptions,
) -> Result<(Volume3D, SequenceParams, Vec<LRSeries>)> {
    let seq = SequenceParams::defaults_for_field(config.field_strength)?;
    let geom = hr_grid(opts.hr_dim, &seq)?;
    let labels = generate_phantom(config.ga_weeks, &geom, config.seed)?;
    let table = TissueTable::builtin(config.field_strength)?;
    let reference = render_signal(&labels, &table, &seq)?;
    let pool = simulate_series_set(
        &reference,
        &seq,
        &opts.motion.config(),
        SERIES_PER_ORIENTATION,
        config.seed,
    )?;
    Ok((reference, seq, pool))
}

/// Setting-wise grid search: simulate nine series once, then for each
/// repeat reconstruct a fresh orientation-balanced subset at every grid
/// weight.
pub fn tune_setting(
    config: &Configuration,
    grid: &GridSpec,
    reg: RegularizerKind,
    opts: &TuneOptions,
) -> Result<TuneResult> {
    config.validate()?;
    grid.validate()?;
    let (reference, seq, pool) = prepare_setting(config, opts)?;
    let psf = PSFSpec::from_sequence(&seq);

    let mut rows = Vec::with_capacity(grid.values.len() * config.repeats);
    for repeat in 0..config.repeats {
        let subset_seed = crate::seeds::derive_seed(config.seed, &[TAG_SUBSET, repeat as u64]);
        let picked = pick_subset(&pool, config.n_series, subset_seed);
        let subset: Vec<LRSeries> = picked.iter().map(|&i| pool[i].clone()).collect();
        let case = PreparedCase {
            op: build_operator(&subset, &reference.geometry, psf, None)?,
            data: stack_slices(&subset),
            reference: reference.clone(),
        };
        for &alpha in &grid.values {
            let cfg = opts.solver_config(reg, alpha);
            rows.push(case.evaluate(reg, &cfg, repeat)?);
        }
    }

    let alpha_star_psnr = select_alpha(&rows, grid, Metric::Psnr)?;
    let alpha_star_ssim = select_alpha(&rows, grid, Metric::Ssim)?;
    Ok(TuneResult {
        rows,
        alpha_star_psnr,
        alpha_star_ssim,
        grid: grid.clone(),
        regularizer: reg,
        source: TuneSource::Setting(config.clone()),
    })
}

// ---------------------------------------------------------------------
// subject-wise protocol
// ---------------------------------------------------------------------

/// One series of a described exam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamSeriesSpec {
    pub orientation: Orientation,
    /// Slice count; omitted means "cover the volume".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_slices: Option<usize>,
}

/// Description of a clinical exam to mimic: gestational age, field
/// strength, per-series orientation and slice count, motion amplitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamDescriptor {
    pub ga_weeks: f64,
    pub field_strength: f64,
    pub motion: MotionLevel,
    pub series: Vec<ExamSeriesSpec>,
    pub seed: u64,
}

impl ExamDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.series.is_empty() {
            return Err(Error::InvalidParameter("exam lists no series".into()));
        }
        if let Some(s) = self.series.iter().find(|s| s.n_slices == Some(0)) {
            return Err(Error::InvalidParameter(format!(
                "series with orientation {} has zero slices",
                s.orientation
            )));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let exam: Self = serde_json::from_str(text)?;
        exam.validate()?;
        Ok(exam)
    }
}

/// Subject-wise grid search: simulate exactly the described series and
/// run the grid once (a single repeat).
pub fn tune_subject(
    exam: &ExamDescriptor,
    grid: &GridSpec,
    reg: RegularizerKind,
    opts: &TuneOptions,
) -> Result<TuneResult> {
    exam.validate()?;
    grid.validate()?;
    let seq = SequenceParams::defaults_for_field(exam.field_strength)?;
    let geom = hr_grid(opts.hr_dim, &seq)?;
    let labels = generate_phantom(exam.ga_weeks, &geom, exam.seed)?;
    let table = TissueTable::builtin(exam.field_strength)?;
    let reference = render_signal(&labels, &table, &seq)?;

    // same-orientation series take consecutive acquisition indices so
    // each gets its own field-of-view shift
    let motion_cfg = exam.motion.config();
    let mut per_orientation = [0usize; 3];
    let mut series = Vec::with_capacity(exam.series.len());
    for spec in &exam.series {
        let series_index = per_orientation[spec.orientation.tag() as usize];
        per_orientation[spec.orientation.tag() as usize] += 1;
        series.push(simulate_lr_series_with(
            &reference,
            spec.orientation,
            &seq,
            &motion_cfg,
            series_index,
            exam.seed,
            SimulateOptions { n_slices: spec.n_slices, psf: None },
        )?);
    }

    let psf = PSFSpec::from_sequence(&seq);
    let case = PreparedCase {
        op: build_operator(&series, &reference.geometry, psf, None)?,
        data: stack_slices(&series),
        reference,
    };
    let mut rows = Vec::with_capacity(grid.values.len());
    for &alpha in &grid.values {
        let cfg = opts.solver_config(reg, alpha);
        rows.push(case.evaluate(reg, &cfg, 0)?);
    }

    let alpha_star_psnr = select_alpha(&rows, grid, Metric::Psnr)?;
    let alpha_star_ssim = select_alpha(&rows, grid, Metric::Ssim)?;
    Ok(TuneResult {
        rows,
        alpha_star_psnr,
        alpha_star_ssim,
        grid: grid.clone(),
        regularizer: reg,
        source: TuneSource::Subject(exam.clone()),
    })
}

// ---------------------------------------------------------------------
// gestational-age sweep
// ---------------------------------------------------------------------

/// Run the setting-wise protocol once per gestational age, deriving an
/// independent phantom seed for each.
pub fn ga_sweep(
    gas: &[f64],
    template: &Configuration,
    grid: &GridSpec,
    reg: RegularizerKind,
    opts: &TuneOptions,
) -> Result<Vec<(f64, TuneResult)>> {
    let mut out = Vec::with_capacity(gas.len());
    for &ga in gas {
        let mut config = template.clone();
        config.ga_weeks = ga;
        config.seed = crate::seeds::derive_seed(template.seed, &[TAG_GA, ga.to_bits()]);
        let result = tune_setting(&config, grid, reg, opts)?;
        out.push((ga, result));
    }
    Ok(out)
}
