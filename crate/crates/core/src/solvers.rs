//! Regularized reconstruction: minimize `0.5 ||Hx - y||^2 + alpha R(x)`.
//!
//! Two regularizers are provided:
//! * isotropic total variation, solved with a primal-dual (Chambolle-Pock)
//!   scheme, and
//! * first-order Tikhonov `R(x) = ||Gx||^2`, solved with conjugate
//!   gradients on the normal equations `(H'H + 2 alpha G'G) x = H'y`.
//!
//! `G` is the forward-difference gradient in voxel units with Neumann
//! (replicate) boundaries; its discrete adjoint is used everywhere, so
//! adjoint consistency holds to rounding error.

use crate::error::{Error, Result};
use crate::forward::ForwardOperator;
use crate::geometry::Volume3D;
use serde::{Deserialize, Serialize};

/// Regularizer choice for the reconstruction objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    /// Isotropic total variation (sum of per-voxel gradient magnitudes).
    TotalVariation,
    /// Squared gradient magnitude, summed over voxels.
    FirstOrderTikhonov,
}

impl RegularizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RegularizerKind::TotalVariation => "tv",
            RegularizerKind::FirstOrderTikhonov => "tikhonov",
        }
    }
}

impl std::str::FromStr for RegularizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tv" | "total_variation" => Ok(RegularizerKind::TotalVariation),
            "tikhonov" | "first_order_tikhonov" => Ok(RegularizerKind::FirstOrderTikhonov),
            other => Err(Error::InvalidParameter(format!("unknown regularizer '{other}'"))),
        }
    }
}

/// Starting point for the iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Zero,
    /// Density-normalized backprojection `H'y / max(H'1, eps)`.
    #[default]
    Backprojection,
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Regularization weight (must be positive).
    pub alpha: f64,
    pub max_iters: usize,
    /// Relative objective-change (TV) or relative residual (CG) threshold.
    pub tol: f64,
    pub init: Init,
}

impl SolverConfig {
    /// Default settings for the total-variation solver.
    pub fn tv(alpha: f64) -> Self {
        Self { alpha, max_iters: 300, tol: 1e-6, init: Init::Backprojection }
    }

    /// Default settings for the Tikhonov solver.
    pub fn tikhonov(alpha: f64) -> Self {
        Self { alpha, max_iters: 100, tol: 1e-6, init: Init::Backprojection }
    }

    /// Defaults appropriate for `kind`.
    pub fn for_kind(kind: RegularizerKind, alpha: f64) -> Self {
        match kind {
            RegularizerKind::TotalVariation => Self::tv(alpha),
            RegularizerKind::FirstOrderTikhonov => Self::tikhonov(alpha),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "regularization weight must be positive, got {}",
                self.alpha
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(Error::InvalidParameter(format!("tolerance must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Outcome of a reconstruction.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub x: Volume3D,
    /// Objective value at the returned iterate.
    pub objective: f64,
    /// Iterations actually performed.
    pub iterations: usize,
    /// Whether the stopping criterion fired before `max_iters`.
    pub converged: bool,
    /// Objective value after each iteration.
    pub objective_trace: Vec<f64>,
}

/// Convert a legacy precision-style weight `lambda` (data term scaled by
/// `lambda`, unit regularizer) to the weight `alpha` of the equivalent
/// unit-data-term objective: `alpha = 1 / lambda`.
pub fn convert_lambda(lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "lambda must be a positive finite number, got {lambda}"
        )));
    }
    Ok(1.0 / lambda)
}

/// Solve the reconstruction problem for the given regularizer.
pub fn reconstruct(
    op: &ForwardOperator,
    y: &[f64],
    regularizer: RegularizerKind,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    cfg.validate()?;
    if y.len() != op.n_rows() {
        return Err(Error::ShapeMismatch(format!(
            "operator has {} rows, data has {}",
            op.n_rows(),
            y.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("measurement data contains non-finite values".into()));
    }
    match regularizer {
        RegularizerKind::TotalVariation => solve_tv(op, y, cfg),
        RegularizerKind::FirstOrderTikhonov => solve_tikhonov(op, y, cfg),
    }
}

/// Evaluate `0.5 ||Hx - y||^2 + alpha R(x)` directly.
pub fn objective(
    op: &ForwardOperator,
    y: &[f64],
    x: &Volume3D,
    regularizer: RegularizerKind,
    alpha: f64,
) -> Result<f64> {
    let hx = op.apply(x)?;
    let data: f64 = hx.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * 0.5;
    let dims = x.geometry.dims;
    let mut g = vec![0.0; 3 * x.data().len()];
    gradient(x.data(), dims, &mut g);
    let reg = match regularizer {
        RegularizerKind::TotalVariation => tv_norm(&g, x.data().len()),
        RegularizerKind::FirstOrderTikhonov => g.iter().map(|v| v * v).sum(),
    };
    Ok(data + alpha * reg)
}

/// Density-normalized backprojection `H'y / max(H'1, eps * max)`.
pub fn backprojection_init(op: &ForwardOperator, y: &[f64]) -> Result<Volume3D> {
    let num = op.apply_adjoint(y)?;
    let den = op.apply_adjoint(&vec![1.0; op.n_rows()])?;
    let dmax = den.data().iter().cloned().fold(0.0f64, f64::max);
    if dmax == 0.0 {
        return Ok(Volume3D::zeros(op.target().clone()));
    }
    let floor = 1e-3 * dmax;
    let data: Vec<f64> = num
        .data()
        .iter()
        .zip(den.data())
        .map(|(n, d)| if *d > floor { n / d } else { 0.0 })
        .collect();
    Ok(Volume3D::from_raw(op.target().clone(), data))
}

fn initial_volume(op: &ForwardOperator, y: &[f64], init: Init) -> Result<Volume3D> {
    match init {
        Init::Zero => Ok(Volume3D::zeros(op.target().clone())),
        Init::Backprojection => backprojection_init(op, y),
    }
}

// ---------------------------------------------------------------------
// finite-difference gradient and its adjoint
// ---------------------------------------------------------------------

/// Forward-difference gradient in voxel units, Neumann boundary (the last
/// sample along each axis gets a zero difference). Output layout is
/// axis-major: `g[a * n + v]`.
pub(crate) fn gradient(x: &[f64], dims: [usize; 3], g: &mut [f64]) {
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    debug_assert_eq!(x.len(), n);
    debug_assert_eq!(g.len(), 3 * n);
    let (gx, rest) = g.split_at_mut(n);
    let (gy, gz) = rest.split_at_mut(n);
    for k in 0..nz {
        for j in 0..ny {
            let row = nx * (j + ny * k);
            for i in 0..nx - 1 {
                gx[row + i] = x[row + i + 1] - x[row + i];
            }
            gx[row + nx - 1] = 0.0;
        }
    }
    for k in 0..nz {
        for j in 0..ny {
            let row = nx * (j + ny * k);
            if j + 1 < ny {
                for i in 0..nx {
                    gy[row + i] = x[row + nx + i] - x[row + i];
                }
            } else {
                gy[row..row + nx].fill(0.0);
            }
        }
    }
    let plane = nx * ny;
    for k in 0..nz {
        for j in 0..ny {
            let row = nx * (j + ny * k);
            if k + 1 < nz {
                for i in 0..nx {
                    gz[row + i] = x[row + plane + i] - x[row + i];
                }
            } else {
                gz[row..row + nx].fill(0.0);
            }
        }
    }
}

/// Exact adjoint of `gradient`:
/// `(G'q)[v] = sum_a q_a[v - e_a]·[v_a > 0] - q_a[v]·[v_a < n_a - 1]`.
pub(crate) fn gradient_adjoint(q: &[f64], dims: [usize; 3], out: &mut [f64]) {
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    debug_assert_eq!(q.len(), 3 * n);
    debug_assert_eq!(out.len(), n);
    let (qx, rest) = q.split_at(n);
    let (qy, qz) = rest.split_at(n);
    let plane = nx * ny;
    for k in 0..nz {
        for j in 0..ny {
            let row = nx * (j + ny * k);
            for i in 0..nx {
                let v = row + i;
                let mut acc = 0.0;
                if i > 0 {
                    acc += qx[v - 1];
                }
                if i + 1 < nx {
                    acc -= qx[v];
                }
                if j > 0 {
                    acc += qy[v - nx];
                }
                if j + 1 < ny {
                    acc -= qy[v];
                }
                if k > 0 {
                    acc += qz[v - plane];
                }
                if k + 1 < nz {
                    acc -= qz[v];
                }
                out[v] = acc;
            }
        }
    }
}

/// Isotropic TV: sum over voxels of the gradient magnitude.
fn tv_norm(g: &[f64], n: usize) -> f64 {
    let (gx, rest) = g.split_at(n);
    let (gy, gz) = rest.split_at(n);
    let mut tv = 0.0;
    for v in 0..n {
        tv += (gx[v] * gx[v] + gy[v] * gy[v] + gz[v] * gz[v]).sqrt();
    }
    tv
}

/// Upper bound on `||G||^2` for the 3-D forward-difference gradient.
const GRAD_NORM_SQ: f64 = 12.0;

// ---------------------------------------------------------------------
// total variation via a primal-dual scheme
// ---------------------------------------------------------------------

fn solve_tv(op: &ForwardOperator, y: &[f64], cfg: &SolverConfig) -> Result<SolveReport> {
    let dims = op.target().dims;
    let n = op.n_cols();
    let m = op.n_rows();
    let alpha = cfg.alpha;

    // step sizes from the norm of the stacked operator K = [H; G]
    let h_norm = op.operator_norm();
    let k_norm = (h_norm * h_norm + GRAD_NORM_SQ).sqrt();
    let sigma = 0.99 / k_norm;
    let tau = sigma;

    let x0 = initial_volume(op, y, cfg.init)?;
    let mut x = x0.into_data();
    let mut p = vec![0.0f64; m]; // dual of the data term
    let mut q = vec![0.0f64; 3 * n]; // dual of the TV term

    // running forward/gradient images of the extrapolated iterate
    let mut ax = vec![0.0f64; m];
    op.apply_raw(&x, &mut ax);
    let mut ax_bar = ax.clone();
    let mut gx = vec![0.0f64; 3 * n];
    gradient(&x, dims, &mut gx);
    let mut gx_bar = gx.clone();

    let mut htp = vec![0.0f64; n];
    let mut gtq = vec![0.0f64; n];
    let mut x_new = vec![0.0f64; n];
    let mut ax_new = vec![0.0f64; m];
    let mut gx_new = vec![0.0f64; 3 * n];

    let mut best_obj = f64::INFINITY;
    let mut best_x = x.clone();
    let mut prev_obj = f64::INFINITY;
    let mut calm = 0usize;
    let mut trace = Vec::with_capacity(cfg.max_iters);
    let mut iterations = 0;
    let mut converged = false;

    for it in 0..cfg.max_iters {
        iterations = it + 1;

        // dual ascent: p <- prox of the quadratic data term's conjugate
        for r in 0..m {
            p[r] = (p[r] + sigma * (ax_bar[r] - y[r])) / (1.0 + sigma);
        }
        // dual ascent: q <- projection onto the per-voxel ball of radius alpha
        {
            let (qx, rest) = q.split_at_mut(n);
            let (qy, qz) = rest.split_at_mut(n);
            let (bx, brest) = gx_bar.split_at(n);
            let (by, bz) = brest.split_at(n);
            for v in 0..n {
                let cx = qx[v] + sigma * bx[v];
                let cy = qy[v] + sigma * by[v];
                let cz = qz[v] + sigma * bz[v];
                let mag = (cx * cx + cy * cy + cz * cz).sqrt();
                let scale = if mag > alpha { alpha / mag } else { 1.0 };
                qx[v] = cx * scale;
                qy[v] = cy * scale;
                qz[v] = cz * scale;
            }
        }

        // primal descent
        op.adjoint_raw(&p, &mut htp);
        gradient_adjoint(&q, dims, &mut gtq);
        for v in 0..n {
            x_new[v] = x[v] - tau * (htp[v] + gtq[v]);
        }

        // forward images of the new iterate (one operator apply per
        // iteration; the extrapolated images follow by linearity)
        op.apply_raw(&x_new, &mut ax_new);
        gradient(&x_new, dims, &mut gx_new);

        let data_term: f64 =
            ax_new.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * 0.5;
        let obj = data_term + alpha * tv_norm(&gx_new, n);
        if !obj.is_finite() {
            return Err(Error::Divergence(format!(
                "total-variation iteration {iterations} produced a non-finite objective"
            )));
        }
        trace.push(obj);
        if obj < best_obj {
            best_obj = obj;
            best_x.copy_from_slice(&x_new);
        }

        // extrapolation x_bar = 2 x_new - x, carried through H and G
        for r in 0..m {
            ax_bar[r] = 2.0 * ax_new[r] - ax[r];
        }
        for v in 0..3 * n {
            gx_bar[v] = 2.0 * gx_new[v] - gx[v];
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut ax, &mut ax_new);
        std::mem::swap(&mut gx, &mut gx_new);

        // stop once the objective is stable for a few iterations
        let rel = (obj - prev_obj).abs() / obj.abs().max(1.0);
        prev_obj = obj;
        if rel < cfg.tol {
            calm += 1;
            if calm >= 3 {
                converged = true;
                break;
            }
        } else {
            calm = 0;
        }
    }

    Ok(SolveReport {
        x: Volume3D::from_raw(op.target().clone(), best_x),
        objective: best_obj,
        iterations,
        converged,
        objective_trace: trace,
    })
}

// ---------------------------------------------------------------------
// first-order Tikhonov via conjugate gradients
// ---------------------------------------------------------------------

/// How often the CG residual is recomputed from scratch.
const CG_REFRESH: usize = 50;

fn solve_tikhonov(op: &ForwardOperator, y: &[f64], cfg: &SolverConfig) -> Result<SolveReport> {
    let dims = op.target().dims;
    let n = op.n_cols();
    let m = op.n_rows();
    let alpha = cfg.alpha;

    // normal operator A x = H'H x + 2 alpha G'G x
    let mut scratch_m = vec![0.0f64; m];
    let mut scratch_g = vec![0.0f64; 3 * n];
    let mut scratch_n = vec![0.0f64; n];
    let apply_a = |x: &[f64], out: &mut [f64],
                   sm: &mut [f64], sg: &mut [f64], sn: &mut [f64]| {
        op.apply_raw(x, sm);
        op.adjoint_raw(sm, out);
        gradient(x, dims, sg);
        gradient_adjoint(sg, dims, sn);
        for v in 0..n {
            out[v] += 2.0 * alpha * sn[v];
        }
    };

    let b = op.apply_adjoint(y)?.into_data();
    let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let y_sq: f64 = y.iter().map(|v| v * v).sum();

    let mut x = initial_volume(op, y, cfg.init)?.into_data();
    let mut r = vec![0.0f64; n];
    apply_a(&x, &mut r, &mut scratch_m, &mut scratch_g, &mut scratch_n);
    for v in 0..n {
        r[v] = b[v] - r[v];
    }
    let mut d = r.clone();
    let mut rs: f64 = r.iter().map(|v| v * v).sum();

    // objective via the quadratic identity
    // J(x) = 0.5 ||y||^2 - 0.5 x'b - 0.5 x'r  with  r = b - A x
    let quad_objective = |x: &[f64], r: &[f64]| -> f64 {
        let xb: f64 = x.iter().zip(b.iter()).map(|(a, c)| a * c).sum();
        let xr: f64 = x.iter().zip(r.iter()).map(|(a, c)| a * c).sum();
        0.5 * y_sq - 0.5 * xb - 0.5 * xr
    };

    let mut trace = Vec::with_capacity(cfg.max_iters);
    let mut iterations = 0;
    let mut converged = b_norm == 0.0 || rs.sqrt() <= cfg.tol * b_norm.max(f64::MIN_POSITIVE);
    let mut ad = vec![0.0f64; n];

    while !converged && iterations < cfg.max_iters {
        iterations += 1;
        apply_a(&d, &mut ad, &mut scratch_m, &mut scratch_g, &mut scratch_n);
        let dad: f64 = d.iter().zip(&ad).map(|(a, c)| a * c).sum();
        if !dad.is_finite() || dad <= 0.0 {
            return Err(Error::Divergence(format!(
                "conjugate-gradient curvature became non-positive ({dad}) at iteration {iterations}"
            )));
        }
        let step = rs / dad;
        for v in 0..n {
            x[v] += step * d[v];
        }
        if iterations % CG_REFRESH == 0 {
            // recompute the true residual to shed accumulated rounding
            apply_a(&x, &mut r, &mut scratch_m, &mut scratch_g, &mut scratch_n);
            for v in 0..n {
                r[v] = b[v] - r[v];
            }
        } else {
            for v in 0..n {
                r[v] -= step * ad[v];
            }
        }
        let rs_new: f64 = r.iter().map(|v| v * v).sum();
        if !rs_new.is_finite() {
            return Err(Error::Divergence(format!(
                "conjugate-gradient residual became non-finite at iteration {iterations}"
            )));
        }
        let obj = quad_objective(&x, &r);
        trace.push(obj);
        if rs_new.sqrt() <= cfg.tol * b_norm.max(f64::MIN_POSITIVE) {
            converged = true;
        }
        let beta = rs_new / rs;
        rs = rs_new;
        for v in 0..n {
            d[v] = r[v] + beta * d[v];
        }
    }

    let objective = if let Some(&last) = trace.last() {
        last
    } else {
        quad_objective(&x, &r)
    };
    Ok(SolveReport {
        x: Volume3D::from_raw(op.target().clone(), x),
        objective,
        iterations,
        converged,
        objective_trace: trace,
    })
}
