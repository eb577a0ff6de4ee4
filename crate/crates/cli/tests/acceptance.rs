//! Acceptance suite: the end-to-end guarantees this toolkit makes.
//!
//! Each test pins one externally meaningful property:
//! * the forward operator and its adjoint agree to rounding error in every
//!   supported acquisition configuration;
//! * grid-tuned regularization weights beat the shipped defaults, for both
//!   regularizers, with a significant paired test;
//! * the tuned weight grows with the number of input series and stays put
//!   across gestational age;
//! * the two solvers produce more similar volumes at tuned weights than at
//!   the defaults;
//! * solver oracles: a closed-form total-variation problem, exact recovery
//!   from noiseless motion-free data, the conjugate-gradient optimality
//!   residual, and monotonicity of the solution path in the weight;
//! * exact rank-test p-values equal brute-force enumeration;
//! * the protocol weight grids are reproduced verbatim;
//! * the `tune` command is byte-reproducible and fits its runtime budget.
//!
//! Everything runs single-threaded in well under an hour; the heavier
//! trend tests use reduced grid sizes where no budget pins 64³.

use std::time::Instant;

use rand::Rng;
use srtune_core::acquisition::{
    sample_motion, simulate_series_set, stack_slices, LRSeries, MotionConfig, MotionLevel,
    SeriesGeometry,
};
use srtune_core::evaluation::{
    compare_reconstructions, foreground_mask, ssim, DEFAULT_MASK_DILATION,
};
use srtune_core::forward::{build_operator, ForwardOperator, MotionError, PSFSpec};
use srtune_core::geometry::{inner_product, Orientation, RigidTransform, Volume3D, VolumeGeometry};
use srtune_core::phantom::{generate_phantom, hr_grid, render_signal, SequenceParams, TissueTable};
use srtune_core::seeds::{derive_seed, stream_rng};
use srtune_core::solvers::{reconstruct, RegularizerKind, SolverConfig};
use srtune_core::stats::{ranksum_test, signedrank_test, TestMethod};
use srtune_core::tuner::{
    ga_sweep, make_grid, select_alpha, tune_setting, Configuration, GridKind, GridSpec, Metric,
    TuneOptions, TuneRow,
};

// =====================================================================
// 1. Operator correctness: randomized adjoint identity
// =====================================================================

/// `|<Hx, y> - <x, H'y>| / (||Hx|| ||y||) < 1e-8` over 20 random trials in
/// each acquisition configuration (1.5 T and 3 T, three and six series),
/// on 64-voxel grids, with every slice carrying nontrivial rigid motion.
/// The whole sweep must finish within a minute.
#[test]
fn test_adjoint_identity_across_acquisition_configs() {
    let t0 = Instant::now();
    let mut checked = 0usize;
    for (ci, &(field, per_orientation)) in
        [(1.5, 1usize), (1.5, 2), (3.0, 1), (3.0, 2)].iter().enumerate()
    {
        let seq = SequenceParams::defaults_for_field(field).unwrap();
        let hr = hr_grid(64, &seq).unwrap();
        let op = motion_heavy_operator(&seq, &hr, per_orientation, 9000 + ci as u64);
        for trial in 0..20u64 {
            let x = random_volume(&hr, derive_seed(1000 + ci as u64, &[trial]));
            let y = random_rows(op.n_rows(), derive_seed(2000 + ci as u64, &[trial]));
            let hx = op.apply(&x).unwrap();
            let hty = op.apply_adjoint(&y).unwrap();
            let lhs: f64 = hx.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs = inner_product(&x, &hty).unwrap();
            let hx_norm = l2(&hx);
            let y_norm = l2(&y);
            let rel = (lhs - rhs).abs() / (hx_norm * y_norm).max(f64::MIN_POSITIVE);
            assert!(
                rel < 1e-8,
                "adjoint identity violated at {field} T, {} series, trial {trial}: {rel:.3e}",
                3 * per_orientation
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 80);
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 60, "adjoint sweep took {elapsed:?}, budget is 1 min");
}

// =====================================================================
// 2. Tuning beats the default weights
// =====================================================================

/// At 1.5 T with three series, on ten independent phantoms at 64³, the
/// weight selected by the grid search improves mean PSNR over the default
/// weight for both regularizers, and the per-phantom paired improvements
/// are significant under the signed-rank test (p < 0.05). Budget: 30 min.
#[test]
fn test_tuned_weights_beat_defaults() {
    let t0 = Instant::now();
    const N_PHANTOMS: usize = 10;

    for (reg, kind, tv_cap) in [
        (RegularizerKind::TotalVariation, GridKind::TvStyle, Some(200)),
        (RegularizerKind::FirstOrderTikhonov, GridKind::TikhonovStyle, None),
    ] {
        let grid = make_grid(kind).unwrap();
        let opts = TuneOptions { hr_dim: 64, max_iters: tv_cap, ..TuneOptions::default() };

        // one grid search per phantom, pooled row table across phantoms
        let mut pooled: Vec<TuneRow> = Vec::new();
        let mut per_phantom: Vec<Vec<TuneRow>> = Vec::new();
        for i in 0..N_PHANTOMS {
            let mut config =
                Configuration::new(1.5, 3, 30.0, derive_seed(0x5EED_2002, &[i as u64]));
            config.repeats = 1;
            let res = tune_setting(&config, &grid, reg, &opts).unwrap();
            for r in &res.rows {
                pooled.push(TuneRow {
                    alpha: r.alpha,
                    repeat: i,
                    psnr_db: r.psnr_db,
                    ssim: r.ssim,
                });
            }
            per_phantom.push(res.rows);
        }

        // the setting-wise protocol selects one weight per configuration:
        // the arg-max of the phantom-averaged PSNR
        let alpha_star = select_alpha(&pooled, &grid, Metric::Psnr).unwrap();
        let psnr_at = |rows: &[TuneRow], alpha: f64| {
            rows.iter().find(|r| r.alpha == alpha).map(|r| r.psnr_db).unwrap()
        };
        let gains: Vec<f64> = per_phantom
            .iter()
            .map(|rows| psnr_at(rows, alpha_star) - psnr_at(rows, grid.default_alpha))
            .collect();
        let mean_gain = gains.iter().sum::<f64>() / gains.len() as f64;
        let zeros = vec![0.0; gains.len()];
        let test = signedrank_test(&gains, &zeros).unwrap();

        println!(
            "{}: alpha* {alpha_star:.4} vs default {:.4}, mean gain {mean_gain:+.2} dB, p {:.4}",
            reg.as_str(),
            grid.default_alpha,
            test.p_value
        );
        assert!(
            mean_gain > 0.0,
            "{}: tuned weight {alpha_star} does not improve on default {} (mean gain {mean_gain:+.3} dB, gains {gains:?})",
            reg.as_str(),
            grid.default_alpha
        );
        assert!(
            test.p_value < 0.05,
            "{}: improvement not significant (p = {:.4}, gains {gains:?})",
            reg.as_str(),
            test.p_value
        );
    }
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 1800, "tuning suite took {elapsed:?}, budget is 30 min");
}

// =====================================================================
// 3. The tuned weight grows with the number of series
// =====================================================================

/// Adding input series grows the data fidelity term relative to the
/// regularizer — both through sheer row count and through the slice
/// registration error that every extra series brings — so the balancing
/// weight must grow. Reconstructions here use motion perturbed by a
/// registration-like error (1 degree / 0.5 mm on every slice), matching
/// pipelines that estimate slice positions rather than knowing them.
/// Across ten phantoms, mean alpha*(6 series) > mean alpha*(3 series) at
/// 1.5 T, with the rank-sum p-value reported. Also checks the mechanism
/// directly: at fixed x, the fidelity value grows when series are added.
///
/// (With oracle motion the optimum still moves right, but only by about
/// 1.4x per doubling — less than this grid's step ratio of 2.33, so the
/// grid arg-max alone cannot resolve it.)
#[test]
fn test_tuned_weight_grows_with_series_count() {
    const N_PHANTOMS: usize = 10;
    let grid = make_grid(GridKind::TikhonovStyle).unwrap();
    let seq = SequenceParams::defaults_for_field(1.5).unwrap();
    let table = TissueTable::builtin(1.5).unwrap();
    let registration_error = MotionConfig {
        corrupted_fraction: 1.0,
        max_translation_mm: 0.5,
        max_rotation_deg: 1.0,
    };

    let mut stars3 = Vec::with_capacity(N_PHANTOMS);
    let mut stars6 = Vec::with_capacity(N_PHANTOMS);
    for i in 0..N_PHANTOMS {
        let seed = derive_seed(0x5EED_2003, &[i as u64]);
        let hr = hr_grid(48, &seq).unwrap();
        let labels = generate_phantom(30.0, &hr, seed).unwrap();
        let reference = render_signal(&labels, &table, &seq).unwrap();
        let pool =
            simulate_series_set(&reference, &seq, &MotionLevel::Little.config(), 2, seed).unwrap();
        for (n_series, out) in [(3usize, &mut stars3), (6, &mut stars6)] {
            // pool order is orientation-major; take one or both per orientation
            let subset: Vec<LRSeries> = if n_series == 3 {
                [0usize, 2, 4].iter().map(|&j| pool[j].clone()).collect()
            } else {
                pool.clone()
            };
            let err = MotionError {
                config: registration_error,
                seed: derive_seed(seed, &[n_series as u64]),
            };
            let op = build_operator(
                &subset,
                &reference.geometry,
                PSFSpec::from_sequence(&seq),
                Some(&err),
            )
            .unwrap();
            let y = stack_slices(&subset);
            let mut best = (f64::NEG_INFINITY, 0.0);
            for &alpha in &grid.values {
                let cfg = SolverConfig::tikhonov(alpha);
                let rep =
                    reconstruct(&op, &y, RegularizerKind::FirstOrderTikhonov, &cfg).unwrap();
                let m = compare_reconstructions(&reference, &rep.x, None).unwrap();
                if m.psnr_db > best.0 {
                    best = (m.psnr_db, alpha);
                }
            }
            out.push(best.1);
        }
    }
    let mean3 = stars3.iter().sum::<f64>() / N_PHANTOMS as f64;
    let mean6 = stars6.iter().sum::<f64>() / N_PHANTOMS as f64;
    let rs = ranksum_test(&stars6, &stars3).unwrap();
    println!(
        "alpha* means: 3 series {mean3:.4}, 6 series {mean6:.4}; rank-sum p {:.4}",
        rs.p_value
    );
    assert!(
        mean6 > mean3,
        "mean tuned weight did not grow with series count: 3 -> {stars3:?}, 6 -> {stars6:?}"
    );
    assert!((0.0..=1.0).contains(&rs.p_value));

    // mechanism: fidelity at fixed x grows when series are added
    let seq = SequenceParams::defaults_for_field(1.5).unwrap();
    let grid48 = hr_grid(48, &seq).unwrap();
    let labels = generate_phantom(30.0, &grid48, 0x5EED_2003).unwrap();
    let table = TissueTable::builtin(1.5).unwrap();
    let reference = render_signal(&labels, &table, &seq).unwrap();
    let pool =
        simulate_series_set(&reference, &seq, &MotionLevel::Little.config(), 2, 0x5EED_2003)
            .unwrap();
    // pool order is orientation-major: one per orientation, then two
    let three: Vec<LRSeries> = [0usize, 2, 4].iter().map(|&i| pool[i].clone()).collect();
    let six: Vec<LRSeries> = pool.clone();
    let fid = |series: &[LRSeries]| {
        let op = build_operator(series, &reference.geometry, PSFSpec::from_sequence(&seq), None)
            .unwrap();
        fidelity(&op, &stack_slices(series), &reference)
    };
    let (f3, f6) = (fid(&three), fid(&six));
    assert!(
        f6 > f3,
        "fidelity at fixed x should grow with series count, got {f3:.3} -> {f6:.3}"
    );
}

// =====================================================================
// 4. The tuned weight is insensitive to gestational age
// =====================================================================

/// Across gestational ages {22, 26, 30, 34} weeks (three phantoms each),
/// at least 80% of the tuned weights fall within one grid step of the
/// pooled median.
#[test]
fn test_tuned_weight_stable_across_gestational_age() {
    let gas = [22.0, 26.0, 30.0, 34.0];
    let grid = make_grid(GridKind::TikhonovStyle).unwrap();
    let opts = TuneOptions { hr_dim: 48, ..TuneOptions::default() };

    let mut stars = Vec::new();
    for rep in 0..3u64 {
        let mut template = Configuration::new(1.5, 3, 30.0, derive_seed(0x5EED_2004, &[rep]));
        template.repeats = 1;
        let sweep =
            ga_sweep(&gas, &template, &grid, RegularizerKind::FirstOrderTikhonov, &opts).unwrap();
        for (_, res) in sweep {
            stars.push(res.alpha_star_psnr);
        }
    }
    assert_eq!(stars.len(), 12);

    let index_of = |alpha: f64| {
        grid.values.iter().position(|&v| v == alpha).expect("alpha* not on the grid") as f64
    };
    let mut indices: Vec<f64> = stars.iter().map(|&a| index_of(a)).collect();
    let raw = indices.clone();
    indices.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = (indices[5] + indices[6]) / 2.0;
    let within = raw.iter().filter(|&&i| (i - median).abs() <= 1.0 + 1e-9).count();
    println!("tuned weights across gestational age: {stars:?} (grid indices {raw:?})");
    assert!(
        within * 10 >= raw.len() * 8,
        "only {within}/{} tuned weights within one grid step of the median index {median}: {stars:?}",
        raw.len()
    );
}

// =====================================================================
// 5. The two solvers agree more at tuned weights
// =====================================================================

/// On ten phantoms, the SSIM between the total-variation and Tikhonov
/// reconstructions of the same data is higher when both use their tuned
/// weights than when both use the defaults (4/3 and 0.01), with
/// signed-rank p < 0.05.
#[test]
fn test_solvers_agree_more_at_tuned_weights() {
    const N_PHANTOMS: usize = 10;
    let tv_grid = make_grid(GridKind::TvStyle).unwrap();
    let tik_grid = make_grid(GridKind::TikhonovStyle).unwrap();
    let seq = SequenceParams::defaults_for_field(1.5).unwrap();
    let table = TissueTable::builtin(1.5).unwrap();

    let mut diffs = Vec::with_capacity(N_PHANTOMS);
    for i in 0..N_PHANTOMS {
        let seed = derive_seed(0x5EED_2005, &[i as u64]);
        let grid48 = hr_grid(48, &seq).unwrap();
        let labels = generate_phantom(30.0, &grid48, seed).unwrap();
        let reference = render_signal(&labels, &table, &seq).unwrap();
        let series =
            simulate_series_set(&reference, &seq, &MotionLevel::Little.config(), 1, seed).unwrap();
        let op = build_operator(&series, &reference.geometry, PSFSpec::from_sequence(&seq), None)
            .unwrap();
        let y = stack_slices(&series);
        let mask = foreground_mask(&reference, DEFAULT_MASK_DILATION);

        let (tv_def, tv_tuned) =
            default_and_tuned(&op, &y, &reference, &mask, RegularizerKind::TotalVariation, &tv_grid);
        let (tik_def, tik_tuned) = default_and_tuned(
            &op,
            &y,
            &reference,
            &mask,
            RegularizerKind::FirstOrderTikhonov,
            &tik_grid,
        );

        let agree_default = ssim(&tv_def, &tik_def, &mask).unwrap();
        let agree_tuned = ssim(&tv_tuned, &tik_tuned, &mask).unwrap();
        diffs.push(agree_tuned - agree_default);
    }

    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let zeros = vec![0.0; diffs.len()];
    let test = signedrank_test(&diffs, &zeros).unwrap();
    println!("solver agreement gain (tuned - default SSIM): mean {mean:+.3}, p {:.4}", test.p_value);
    assert!(mean > 0.0, "solvers did not converge under tuning: diffs {diffs:?}");
    assert!(test.p_value < 0.05, "agreement gain not significant (p = {:.4})", test.p_value);
}

// =====================================================================
// 6. Solver oracles
// =====================================================================

/// On a two-voxel identity problem, minimize
/// `0.5 (x0² + (x1-1)²) + 0.2 |x1 - x0|`. The minimizer is exactly
/// (0.2, 0.8); the solver must land within 1e-4.
#[test]
fn test_two_voxel_tv_closed_form() {
    let hr = VolumeGeometry::axis_aligned_centered([2, 1, 1], [1.0; 3]).unwrap();
    let geometry = SeriesGeometry {
        nu: 2,
        nv: 1,
        n_slices: 1,
        in_plane_mm: 1.0,
        slice_spacing_mm: 1.0,
        slice_thickness_mm: 1.0,
        origin: [-0.5, 0.0, 0.0],
        u_dir: [1.0, 0.0, 0.0],
        v_dir: [0.0, 1.0, 0.0],
        normal: [0.0, 0.0, 1.0],
    };
    let series = LRSeries::shell(
        Orientation::Axial,
        0,
        geometry,
        vec![RigidTransform::identity()],
        vec![false],
    )
    .unwrap();
    let op =
        build_operator(std::slice::from_ref(&series), &hr, PSFSpec::near_delta(), None).unwrap();

    // with a near-delta profile and pixels on the voxel centers, H = I
    let probe = Volume3D::new(hr.clone(), vec![0.3, 0.9]).unwrap();
    let hx = op.apply(&probe).unwrap();
    assert!(
        (hx[0] - 0.3).abs() < 1e-9 && (hx[1] - 0.9).abs() < 1e-9,
        "operator should be the identity here, got {hx:?}"
    );

    let y = vec![0.0, 1.0];
    let mut cfg = SolverConfig::tv(0.2);
    cfg.max_iters = 20_000;
    cfg.tol = 1e-14;
    let rep = reconstruct(&op, &y, RegularizerKind::TotalVariation, &cfg).unwrap();
    let sol = rep.x.data();
    assert!(
        (sol[0] - 0.2).abs() < 1e-4 && (sol[1] - 0.8).abs() < 1e-4,
        "closed-form minimizer is (0.2, 0.8), solver returned ({:.6}, {:.6})",
        sol[0],
        sol[1]
    );
}

/// With zero noise and zero motion the simulated data are exactly
/// consistent with the forward model, and a nearly unregularized
/// reconstruction recovers the reference above 40 dB.
///
/// The test volume is smooth: content that is high-frequency along all
/// three axes at once is attenuated below recoverability by every
/// series' slice profile, so exact recovery is only defined for signals
/// inside the acquisition's pass band.
#[test]
fn test_noiseless_motion_free_recovery() {
    let mut seq = SequenceParams::defaults_for_field(1.5).unwrap();
    seq.noise_sd = 0.0;
    let grid48 = hr_grid(48, &seq).unwrap();
    let reference = blob_volume(&grid48, 0x5EED_2006);
    let series =
        simulate_series_set(&reference, &seq, &MotionLevel::None.config(), 1, 0x5EED_2006)
            .unwrap();
    let op = build_operator(&series, &reference.geometry, PSFSpec::from_sequence(&seq), None)
        .unwrap();
    let y = stack_slices(&series);

    // the simulation and the reconstruction share the forward model
    let hx = op.apply(&reference).unwrap();
    let max_dev =
        hx.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
    assert!(max_dev < 1e-12, "noiseless data should equal H(reference), max dev {max_dev:.3e}");

    let mut cfg = SolverConfig::tikhonov(1e-6);
    cfg.max_iters = 600;
    cfg.tol = 1e-12;
    let rep = reconstruct(&op, &y, RegularizerKind::FirstOrderTikhonov, &cfg).unwrap();
    let metrics = compare_reconstructions(&reference, &rep.x, None).unwrap();
    assert!(
        metrics.psnr_db > 40.0,
        "noiseless recovery reached only {:.2} dB (ssim {:.4})",
        metrics.psnr_db,
        metrics.ssim
    );
}

/// The conjugate-gradient solution satisfies its optimality condition:
/// the relative residual of `(H'H + 2 alpha G'G) x = H'y` is below 1e-6.
#[test]
fn test_cg_solution_satisfies_normal_equations() {
    let seq = SequenceParams::defaults_for_field(1.5).unwrap();
    let grid32 = hr_grid(32, &seq).unwrap();
    let x_true = blob_volume(&grid32, 0x5EED_2007);
    let series =
        simulate_series_set(&x_true, &seq, &MotionLevel::Little.config(), 1, 0x5EED_2007).unwrap();
    let op =
        build_operator(&series, &x_true.geometry, PSFSpec::from_sequence(&seq), None).unwrap();
    let y = stack_slices(&series);

    let alpha = 0.01;
    let mut cfg = SolverConfig::tikhonov(alpha);
    cfg.max_iters = 500;
    cfg.tol = 1e-10;
    let rep = reconstruct(&op, &y, RegularizerKind::FirstOrderTikhonov, &cfg).unwrap();

    let hx = op.apply(&rep.x).unwrap();
    let hthx = op.apply_adjoint(&hx).unwrap();
    let gtgx = grad_adjoint_grad(&rep.x);
    let hty = op.apply_adjoint(&y).unwrap();
    let residual: f64 = hthx
        .data()
        .iter()
        .zip(&gtgx)
        .zip(hty.data())
        .map(|((a, g), b)| {
            let r = a + 2.0 * alpha * g - b;
            r * r
        })
        .sum::<f64>()
        .sqrt();
    let rel = residual / l2(hty.data());
    assert!(rel < 1e-6, "normal-equations residual too large: {rel:.3e}");
}

/// Exact minimizers are monotone in the weight: as alpha rises the data
/// fidelity cannot fall and the regularizer value cannot rise. Verified
/// over the full protocol grids with tightly converged solves on three
/// synthetic instances, for both regularizers.
#[test]
fn test_solution_path_monotone_in_weight() {
    let seq = SequenceParams::defaults_for_field(1.5).unwrap();
    let grid16 = hr_grid(16, &seq).unwrap();
    let tv_grid = make_grid(GridKind::TvStyle).unwrap();
    let tik_grid = make_grid(GridKind::TikhonovStyle).unwrap();

    for inst in 0..3u64 {
        let seed = derive_seed(0x5EED_2008, &[inst]);
        let x_true = blob_volume(&grid16, seed);
        let series =
            simulate_series_set(&x_true, &seq, &MotionLevel::Little.config(), 1, seed).unwrap();
        let op = build_operator(&series, &x_true.geometry, PSFSpec::from_sequence(&seq), None)
            .unwrap();
        let y = stack_slices(&series);

        for (reg, grid, iters, tol) in [
            (RegularizerKind::TotalVariation, &tv_grid, 2000usize, 1e-12),
            (RegularizerKind::FirstOrderTikhonov, &tik_grid, 500, 1e-13),
        ] {
            let mut prev: Option<(f64, f64, f64)> = None;
            for &alpha in &grid.values {
                let mut cfg = SolverConfig::for_kind(reg, alpha);
                cfg.max_iters = iters;
                cfg.tol = tol;
                let rep = reconstruct(&op, &y, reg, &cfg).unwrap();
                let fid = fidelity(&op, &y, &rep.x);
                let reg_val = match reg {
                    RegularizerKind::TotalVariation => total_variation(&rep.x),
                    RegularizerKind::FirstOrderTikhonov => gradient_energy(&rep.x),
                };
                if let Some((prev_alpha, prev_fid, prev_reg)) = prev {
                    let fid_slack = 1e-6 * prev_fid.abs().max(1.0);
                    let reg_slack = 1e-6 * prev_reg.abs().max(1.0);
                    assert!(
                        fid >= prev_fid - fid_slack,
                        "{}: fidelity fell from {prev_fid:.6} (alpha {prev_alpha}) to {fid:.6} (alpha {alpha}) on instance {inst}",
                        reg.as_str()
                    );
                    assert!(
                        reg_val <= prev_reg + reg_slack,
                        "{}: regularizer rose from {prev_reg:.6} (alpha {prev_alpha}) to {reg_val:.6} (alpha {alpha}) on instance {inst}",
                        reg.as_str()
                    );
                }
                prev = Some((alpha, fid, reg_val));
            }
        }
    }
}

// =====================================================================
// 7. Exact rank statistics match brute-force enumeration
// =====================================================================

/// For every sample-size combination small enough to enumerate (total at
/// most 8), the exact rank-sum and signed-rank p-values equal independent
/// brute-force enumeration bit for bit, on untied and heavily tied data.
/// The documented examples also reproduce exactly.
#[test]
fn test_exact_rank_pvalues_match_enumeration() {
    let mut rng = stream_rng(0x5EED_2009, &[]);

    for na in 1..8usize {
        for nb in 1..=(8 - na) {
            for rep in 0..3 {
                let mut draw = |n: usize| -> Vec<f64> {
                    (0..n)
                        .map(|_| {
                            if rep == 2 {
                                rng.gen_range(0..3) as f64 // heavy ties
                            } else {
                                rng.gen_range(-50..50) as f64
                            }
                        })
                        .collect()
                };
                let a = draw(na);
                let b = draw(nb);
                let res = ranksum_test(&a, &b).unwrap();
                assert_eq!(res.method, TestMethod::Exact);
                let brute = brute_ranksum_p(&a, &b);
                assert!(
                    (res.p_value - brute).abs() < 1e-12,
                    "rank-sum mismatch for a={a:?} b={b:?}: {} vs brute {brute}",
                    res.p_value
                );
            }
        }
    }

    for m in 1..=8usize {
        for rep in 0..3 {
            let diffs: Vec<f64> = (0..m)
                .map(|_| {
                    let magnitude = if rep == 2 {
                        rng.gen_range(1..3) as f64 // tied magnitudes
                    } else {
                        rng.gen_range(1..40) as f64
                    };
                    if rng.gen_bool(0.5) {
                        magnitude
                    } else {
                        -magnitude
                    }
                })
                .collect();
            let zeros = vec![0.0; m];
            let res = signedrank_test(&diffs, &zeros).unwrap();
            assert_eq!(res.method, TestMethod::Exact);
            let brute = brute_signedrank_p(&diffs);
            assert!(
                (res.p_value - brute).abs() < 1e-12,
                "signed-rank mismatch for diffs={diffs:?}: {} vs brute {brute}",
                res.p_value
            );
        }
    }

    // documented examples
    let r = ranksum_test(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
    assert_eq!(r.p_value, 0.1, "fully separated 3-vs-3 rank-sum p");
    let s = signedrank_test(&[1.0, 2.0, 3.0], &[0.0; 3]).unwrap();
    assert_eq!(s.statistic, 6.0);
    assert_eq!(s.p_value, 0.25, "three positive differences");
    let s2 = signedrank_test(&[1.0, 2.0], &[0.0; 2]).unwrap();
    assert_eq!(s2.p_value, 0.5, "two positive differences");
    // zero differences are dropped, not counted as evidence
    let s3 = signedrank_test(&[1.0, 2.0, 5.0], &[1.0, 0.0, 0.0]).unwrap();
    assert_eq!(s3.n, [2, 1]);
}

// =====================================================================
// 8. Protocol grids verbatim
// =====================================================================

/// The two protocol grids are exactly as advertised: the reciprocals of
/// {0.75, 1, 1.5, 2, 2.5, 3, 3.5, 5} with default 4/3, and ten geometric
/// values on [1e-3, 2] (ratio 2000^(1/9)) plus the default 0.01.
#[test]
fn test_protocol_grids_verbatim() {
    let tv = make_grid(GridKind::TvStyle).unwrap();
    let expected_tv =
        [0.2, 1.0 / 3.5, 1.0 / 3.0, 0.4, 0.5, 1.0 / 1.5, 1.0, 4.0 / 3.0];
    assert_eq!(tv.values.len(), 8);
    for (got, want) in tv.values.iter().zip(&expected_tv) {
        assert!((got - want).abs() < 1e-15, "tv grid value {got} != {want}");
    }
    assert!((tv.default_alpha - 4.0 / 3.0).abs() < 1e-15);
    assert!(tv.values.windows(2).all(|w| w[0] < w[1]), "grid must be sorted");

    let tik = make_grid(GridKind::TikhonovStyle).unwrap();
    assert_eq!(tik.values.len(), 11);
    assert_eq!(tik.default_alpha, 0.01);
    assert!(tik.values.contains(&0.01));
    let geometric: Vec<f64> = tik.values.iter().copied().filter(|&v| v != 0.01).collect();
    assert_eq!(geometric.len(), 10);
    assert_eq!(geometric[0], 1e-3);
    assert_eq!(geometric[9], 2.0);
    for (i, v) in geometric.iter().enumerate() {
        let want = 1e-3 * 2000f64.powf(i as f64 / 9.0);
        assert!(
            (v - want).abs() <= 1e-12 * want,
            "geometric grid value {i}: {v} != {want}"
        );
    }
    assert!(tik.values.windows(2).all(|w| w[0] < w[1]), "grid must be sorted");
}

// =====================================================================
// 9. The tune command is reproducible and fits its budget
// =====================================================================

/// Two identical `tune` invocations (1.5 T, 3 series, 64³, full geometric
/// grid, 3 repeats, fixed seed) each finish within 10 minutes and produce
/// byte-identical row tables, summaries, and manifests.
#[test]
fn test_tune_command_reproducible_and_within_budget() {
    let bin = env!("CARGO_BIN_EXE_srtune");
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let t0 = Instant::now();
        let status = std::process::Command::new(bin)
            .args([
                "tune",
                "--protocol",
                "setting",
                "--field",
                "1.5",
                "--series",
                "3",
                "--ga",
                "30",
                "--size",
                "64",
                "--regularizer",
                "tikhonov",
                "--repeats",
                "3",
                "--seed",
                "314159",
                "--out",
            ])
            .arg(&out)
            .current_dir(dir.path())
            .status()
            .unwrap();
        let elapsed = t0.elapsed();
        assert!(status.success(), "tune run '{name}' failed");
        assert!(elapsed.as_secs() < 600, "tune run took {elapsed:?}, budget is 10 min");
        outputs.push(out);
    }

    for file in ["rows.csv", "summary.json", "manifest.json"] {
        let a = std::fs::read(outputs[0].join(file)).unwrap();
        let b = std::fs::read(outputs[1].join(file)).unwrap();
        assert!(!a.is_empty(), "{file} is empty");
        assert_eq!(a, b, "{file} differs between identical runs");
    }

    // the run really covered the full grid: 11 weights x 3 repeats
    let rows = std::fs::read_to_string(outputs[0].join("rows.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 11 * 3, "unexpected row count in rows.csv");
}

// =====================================================================
// helpers
// =====================================================================

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn random_volume(geom: &VolumeGeometry, seed: u64) -> Volume3D {
    let mut rng = stream_rng(seed, &[]);
    let data: Vec<f64> = (0..geom.n_voxels()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Volume3D::new(geom.clone(), data).unwrap()
}

fn random_rows(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, &[]);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Operator whose every slice carries a nontrivial rigid transform, to
/// exercise the motion-resampling path of the adjoint.
fn motion_heavy_operator(
    seq: &SequenceParams,
    hr: &VolumeGeometry,
    per_orientation: usize,
    seed: u64,
) -> ForwardOperator {
    let motion = MotionConfig {
        corrupted_fraction: 1.0,
        max_translation_mm: 3.0,
        max_rotation_deg: 5.0,
    };
    let mut series = Vec::new();
    for orientation in Orientation::ALL {
        for idx in 0..per_orientation {
            let geom = SeriesGeometry::covering(hr, orientation, seq, idx, None).unwrap();
            let motion_seed = derive_seed(seed, &[orientation.tag(), idx as u64]);
            let (transforms, corrupted) =
                sample_motion(&motion, geom.n_slices, motion_seed).unwrap();
            series
                .push(LRSeries::shell(orientation, idx, geom, transforms, corrupted).unwrap());
        }
    }
    build_operator(&series, hr, PSFSpec::from_sequence(seq), None).unwrap()
}

/// Smooth synthetic test volume: a few Gaussian blobs on a dark field.
fn blob_volume(geom: &VolumeGeometry, seed: u64) -> Volume3D {
    let mut rng = stream_rng(seed, &[]);
    let [nx, ny, nz] = geom.dims;
    let blobs: Vec<([f64; 3], f64, f64)> = (0..4)
        .map(|_| {
            let center = [
                rng.gen_range(0.25..0.75) * nx as f64,
                rng.gen_range(0.25..0.75) * ny as f64,
                rng.gen_range(0.25..0.75) * nz as f64,
            ];
            let radius = rng.gen_range(0.1..0.25) * nx as f64;
            let amplitude = rng.gen_range(0.3..0.8);
            (center, radius, amplitude)
        })
        .collect();
    let mut data = vec![0.0f64; geom.n_voxels()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let mut v = 0.0;
                for (c, r, a) in &blobs {
                    let d2 = (i as f64 - c[0]).powi(2)
                        + (j as f64 - c[1]).powi(2)
                        + (k as f64 - c[2]).powi(2);
                    v += a * (-d2 / (2.0 * r * r)).exp();
                }
                data[geom.index(i, j, k)] = v.min(1.0);
            }
        }
    }
    Volume3D::new(geom.clone(), data).unwrap()
}

/// `0.5 ||Hx - y||²`.
fn fidelity(op: &ForwardOperator, y: &[f64], x: &Volume3D) -> f64 {
    let hx = op.apply(x).unwrap();
    0.5 * hx.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

/// Forward differences along each axis in voxel units, replicate
/// boundary: interior edges only.
fn forward_diffs(v: &Volume3D) -> [Vec<f64>; 3] {
    let [nx, ny, nz] = v.geometry.dims;
    let g = &v.geometry;
    let d = v.data();
    let mut out = [
        vec![0.0; d.len()],
        vec![0.0; d.len()],
        vec![0.0; d.len()],
    ];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let c = g.index(i, j, k);
                if i + 1 < nx {
                    out[0][c] = d[g.index(i + 1, j, k)] - d[c];
                }
                if j + 1 < ny {
                    out[1][c] = d[g.index(i, j + 1, k)] - d[c];
                }
                if k + 1 < nz {
                    out[2][c] = d[g.index(i, j, k + 1)] - d[c];
                }
            }
        }
    }
    out
}

/// Isotropic total variation: sum of per-voxel gradient magnitudes.
fn total_variation(v: &Volume3D) -> f64 {
    let [gx, gy, gz] = forward_diffs(v);
    gx.iter()
        .zip(&gy)
        .zip(&gz)
        .map(|((a, b), c)| (a * a + b * b + c * c).sqrt())
        .sum()
}

/// First-order Tikhonov value: squared gradient magnitude, summed.
fn gradient_energy(v: &Volume3D) -> f64 {
    let [gx, gy, gz] = forward_diffs(v);
    gx.iter().zip(&gy).zip(&gz).map(|((a, b), c)| a * a + b * b + c * c).sum()
}

/// `G'G x` for the same gradient convention, via edge scatter.
fn grad_adjoint_grad(v: &Volume3D) -> Vec<f64> {
    let [nx, ny, nz] = v.geometry.dims;
    let g = &v.geometry;
    let d = v.data();
    let mut out = vec![0.0f64; d.len()];
    let mut edge = |a: usize, b: usize| {
        let diff = d[b] - d[a];
        out[a] -= diff;
        out[b] += diff;
    };
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let c = g.index(i, j, k);
                if i + 1 < nx {
                    edge(c, g.index(i + 1, j, k));
                }
                if j + 1 < ny {
                    edge(c, g.index(i, j + 1, k));
                }
                if k + 1 < nz {
                    edge(c, g.index(i, j, k + 1));
                }
            }
        }
    }
    out
}

/// Run the full grid for one regularizer, returning the reconstruction at
/// the default weight and at the weight with the best SSIM against the
/// reference (ties toward the smaller weight).
fn default_and_tuned(
    op: &ForwardOperator,
    y: &[f64],
    reference: &Volume3D,
    mask: &[bool],
    reg: RegularizerKind,
    grid: &GridSpec,
) -> (Volume3D, Volume3D) {
    let mut at_default: Option<Volume3D> = None;
    let mut best: Option<(f64, Volume3D)> = None;
    for &alpha in &grid.values {
        let mut cfg = SolverConfig::for_kind(reg, alpha);
        if reg == RegularizerKind::TotalVariation {
            cfg.max_iters = 200;
        }
        let rep = reconstruct(op, y, reg, &cfg).unwrap();
        let score = ssim(reference, &rep.x, mask).unwrap();
        if alpha == grid.default_alpha {
            at_default = Some(rep.x.clone());
        }
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, rep.x));
        }
    }
    (at_default.expect("grid contains its default"), best.unwrap().1)
}

/// Independent midranks (1-based, ties averaged).
fn brute_midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0; // mean of 1-based positions i+1..=j+1
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Brute-force two-sided exact rank-sum p: enumerate every equal-size
/// regrouping of the combined sample and count rank sums at least as far
/// from the mean as observed. Integer arithmetic on doubled midranks.
fn brute_ranksum_p(a: &[f64], b: &[f64]) -> f64 {
    let (na, n) = (a.len(), a.len() + b.len());
    let combined: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    let doubled: Vec<u64> =
        brute_midranks(&combined).iter().map(|r| (2.0 * r).round() as u64).collect();
    let mean_doubled = (na * (n + 1)) as u64;
    let obs: u64 = doubled[..na].iter().sum();
    let obs_dev = obs.abs_diff(mean_doubled);

    let mut extreme = 0u64;
    let mut all = 0u64;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != na {
            continue;
        }
        let s: u64 = (0..n).filter(|&i| mask & (1 << i) != 0).map(|i| doubled[i]).sum();
        all += 1;
        if s.abs_diff(mean_doubled) >= obs_dev {
            extreme += 1;
        }
    }
    extreme as f64 / all as f64
}

/// Brute-force two-sided exact signed-rank p: enumerate every sign
/// assignment of the nonzero differences and count statistics at least as
/// far from m(m+1)/4 as observed. Integer arithmetic on doubled midranks.
fn brute_signedrank_p(diffs: &[f64]) -> f64 {
    let kept: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let m = kept.len();
    let abs: Vec<f64> = kept.iter().map(|d| d.abs()).collect();
    let doubled: Vec<u64> = brute_midranks(&abs).iter().map(|r| (2.0 * r).round() as u64).collect();
    let total: u64 = doubled.iter().sum(); // = m(m+1)
    let obs4: u64 = kept
        .iter()
        .zip(&doubled)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| 2 * r)
        .sum();
    let obs_dev = obs4.abs_diff(total);

    let mut extreme = 0u64;
    for mask in 0u32..(1 << m) {
        let s: u64 = (0..m).filter(|&i| mask & (1 << i) != 0).map(|i| doubled[i]).sum();
        if (2 * s).abs_diff(total) >= obs_dev {
            extreme += 1;
        }
    }
    extreme as f64 / (1u64 << m) as f64
}
