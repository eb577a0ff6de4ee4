//! Rank-based two-sample significance tests.
//!
//! Two-sided Wilcoxon–Mann–Whitney rank-sum for independent samples and
//! Wilcoxon signed-rank for paired samples. Both use midranks for ties,
//! switch between an exact null distribution (small samples) and a
//! tie-corrected normal approximation with continuity correction (large
//! samples), and report which path was taken.

use crate::error::{Error, Result};

/// Combined-size threshold up to which the rank-sum null distribution is
/// enumerated exactly.
pub const RANKSUM_EXACT_MAX_N: usize = 12;

/// Number of nonzero pairs up to which the signed-rank null distribution
/// is enumerated exactly.
pub const SIGNEDRANK_EXACT_MAX_N: usize = 20;

/// How a p-value was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    /// Full enumeration of the permutation null.
    Exact,
    /// Normal approximation with tie correction and continuity correction.
    NormalApprox,
}

/// Outcome of a rank test.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StatTestResult {
    /// Rank-sum: Mann–Whitney U of the first sample. Signed-rank: sum of
    /// ranks of positive differences (W+).
    pub statistic: f64,
    /// Two-sided p-value in [0, 1].
    pub p_value: f64,
    pub method: TestMethod,
    /// Rank-sum: the two sample sizes. Signed-rank: (nonzero pairs kept,
    /// zero differences dropped).
    pub n: [usize; 2],
}

fn check_finite(name: &str, xs: &[f64]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::InvalidParameter(format!("{name}: empty sample")));
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{name}: sample contains NaN/inf")));
    }
    Ok(())
}

/// Midranks (1-based, ties averaged) of `values`.
fn midranks(values: &[f64]) -> Vec<f64> {
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
        // positions i+1 ..= j+1 share the average rank
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Sizes of tie groups among `values`.
fn tie_group_sizes(values: &[f64]) -> Vec<usize> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut groups = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        groups.push(j + 1 - i);
        i = j + 1;
    }
    groups
}

/// Standard normal CDF.
fn phi(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Two-sided Wilcoxon–Mann–Whitney rank-sum test for independent samples.
///
/// The statistic is the Mann–Whitney U of `a`. Exact enumeration whenever
/// `a.len() + b.len() <= RANKSUM_EXACT_MAX_N`, otherwise the tie-corrected
/// normal approximation with a 0.5 continuity correction.
pub fn ranksum_test(a: &[f64], b: &[f64]) -> Result<StatTestResult> {
    check_finite("a", a)?;
    check_finite("b", b)?;
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    let combined: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    let ranks = midranks(&combined);
    let rank_sum_a: f64 = ranks[..na].iter().sum();
    let u = rank_sum_a - (na * (na + 1)) as f64 / 2.0;

    if n <= RANKSUM_EXACT_MAX_N {
        let p = ranksum_exact_p(&ranks, na);
        return Ok(StatTestResult { statistic: u, p_value: p, method: TestMethod::Exact, n: [na, nb] });
    }
    let p = ranksum_normal_p(u, na, nb, &tie_group_sizes(&combined));
    Ok(StatTestResult { statistic: u, p_value: p, method: TestMethod::NormalApprox, n: [na, nb] })
}

/// Exact two-sided p for the rank-sum test: the fraction of the
/// C(n, na) equal-size regroupings whose doubled rank sum lies at least
/// as far from its mean as the observed one. Doubled midranks are
/// integers, so everything stays in integer arithmetic.
fn ranksum_exact_p(ranks: &[f64], na: usize) -> f64 {
    let n = ranks.len();
    let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
    let total: u64 = doubled.iter().sum(); // = n(n+1)
    debug_assert_eq!(total, (n * (n + 1)) as u64);
    let mean_doubled = (na as u64) * (n as u64 + 1);
    let obs: u64 = doubled[..na].iter().sum();
    let obs_dev = obs.abs_diff(mean_doubled);

    // dp[c][s] = #ways to pick c items with doubled-rank sum s
    let smax = total as usize;
    let mut dp = vec![vec![0u64; smax + 1]; na + 1];
    dp[0][0] = 1;
    for &d in &doubled {
        for c in (0..na).rev() {
            for s in (0..=smax - d as usize).rev() {
                if dp[c][s] > 0 {
                    dp[c + 1][s + d as usize] += dp[c][s];
                }
            }
        }
    }
    let mut extreme = 0u64;
    let mut all = 0u64;
    for (s, &count) in dp[na].iter().enumerate() {
        if count == 0 {
            continue;
        }
        all += count;
        if (s as u64).abs_diff(mean_doubled) >= obs_dev {
            extreme += count;
        }
    }
    extreme as f64 / all as f64
}

/// Tie-corrected normal approximation for the rank-sum test.
fn ranksum_normal_p(u: f64, na: usize, nb: usize, ties: &[usize]) -> f64 {
    let (na, nb) = (na as f64, nb as f64);
    let n = na + nb;
    let mean = na * nb / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0; // every observation tied
    }
    let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
    (2.0 * phi(-z)).min(1.0)
}

/// Two-sided Wilcoxon signed-rank test for paired samples.
///
/// Differences `a[i] - b[i]` equal to zero are dropped. The statistic is
/// the sum of the ranks of positive differences. Exact enumeration of the
/// 2^m sign assignments whenever m (nonzero pairs) is at most
/// `SIGNEDRANK_EXACT_MAX_N`, otherwise the tie-corrected normal
/// approximation with a 0.5 continuity correction.
pub fn signedrank_test(a: &[f64], b: &[f64]) -> Result<StatTestResult> {
    check_finite("a", a)?;
    check_finite("b", b)?;
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "paired test needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let zeros = a.len() - diffs.len();
    let m = diffs.len();
    if m == 0 {
        // No information either way.
        return Ok(StatTestResult { statistic: 0.0, p_value: 1.0, method: TestMethod::Exact, n: [0, zeros] });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();

    if m <= SIGNEDRANK_EXACT_MAX_N {
        let p = signedrank_exact_p(&ranks, w_plus);
        return Ok(StatTestResult { statistic: w_plus, p_value: p, method: TestMethod::Exact, n: [m, zeros] });
    }
    let p = signedrank_normal_p(w_plus, m, &tie_group_sizes(&abs));
    Ok(StatTestResult { statistic: w_plus, p_value: p, method: TestMethod::NormalApprox, n: [m, zeros] })
}

/// Exact two-sided p for the signed-rank test: fraction of the 2^m sign
/// assignments whose W+ lies at least as far from m(m+1)/4 as observed.
/// Comparisons use 4·W+ (integers, since doubled midranks are integers).
fn signedrank_exact_p(ranks: &[f64], w_obs: f64) -> f64 {
    let m = ranks.len();
    let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
    let total: u64 = doubled.iter().sum(); // = m(m+1)
    let obs4 = (4.0 * w_obs).round() as u64; // 2 * doubled W+
    let obs_dev = obs4.abs_diff(total);

    // dp[s] = #sign assignments whose positive set has doubled sum s
    let smax = total as usize;
    let mut dp = vec![0u64; smax + 1];
    dp[0] = 1;
    for &d in &doubled {
        for s in (0..=smax - d as usize).rev() {
            if dp[s] > 0 {
                let add = dp[s];
                dp[s + d as usize] += add;
            }
        }
    }
    let mut extreme = 0u64;
    for (s, &count) in dp.iter().enumerate() {
        if count > 0 && (2 * s as u64).abs_diff(total) >= obs_dev {
            extreme += count;
        }
    }
    extreme as f64 / (1u64 << m) as f64
}

/// Tie-corrected normal approximation for the signed-rank test.
fn signedrank_normal_p(w: f64, m: usize, ties: &[usize]) -> f64 {
    let mf = m as f64;
    let mean = mf * (mf + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = mf * (mf + 1.0) * (2.0 * mf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    (2.0 * phi(-z)).min(1.0)
}
