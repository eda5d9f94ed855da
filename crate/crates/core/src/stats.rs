//! Statistical primitives shared by the pipeline: Wilcoxon rank tests,
//! Pearson correlation, ROC/AUC and percentile helpers.
//!
//! All tests are two-sided. Ties get mid-ranks; the normal approximations
//! carry the usual tie correction and a 0.5 continuity correction.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

/// Largest pooled sample size for which `rank_sum` enumerates exactly.
pub const RANK_SUM_EXACT_MAX: usize = 20;
/// Largest number of non-zero differences for which `signed_rank` is exact.
pub const SIGNED_RANK_EXACT_MAX: usize = 25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("invalid argument: {0}")]
    Argument(String),
}

pub type Result<T> = std::result::Result<T, StatsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestMethod {
    RankSum,
    SignedRank,
    Pearson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub method: TestMethod,
    /// True when the p-value comes from exact enumeration.
    pub exact: bool,
}

/// Mid-ranks (1-based) of `values`, plus the tie-group sizes.
pub fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j share rank (i+1 + j) / 2
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        ties.push(j - i);
        i = j;
    }
    (ranks, ties)
}

fn tie_sum(ties: &[usize]) -> f64 {
    ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum()
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

fn two_sided_normal(deviation: f64, sd: f64) -> f64 {
    if sd <= 0.0 {
        return 1.0;
    }
    let z = ((deviation.abs() - 0.5).max(0.0)) / sd;
    (2.0 * (1.0 - standard_normal().cdf(z))).clamp(0.0, 1.0)
}

/// Two-sided Wilcoxon rank-sum (Mann–Whitney) test of `x` against `y`.
///
/// The statistic is `U` for `x`. Exact enumeration of the (tie-aware)
/// permutation distribution is used when `x.len() + y.len() <= 20`.
pub fn rank_sum(x: &[f64], y: &[f64]) -> Result<TestResult> {
    if x.len() + y.len() <= RANK_SUM_EXACT_MAX {
        rank_sum_exact(x, y)
    } else {
        rank_sum_normal(x, y)
    }
}

fn check_two_samples(x: &[f64], y: &[f64]) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(StatsError::Argument("rank-sum needs two non-empty samples".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::Argument("rank-sum samples must be finite".into()));
    }
    Ok(())
}

fn pooled_ranks(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    midranks(&pooled)
}

/// Rank-sum test with the exact permutation distribution, whatever the size.
pub fn rank_sum_exact(x: &[f64], y: &[f64]) -> Result<TestResult> {
    check_two_samples(x, y)?;
    let (n1, n) = (x.len(), x.len() + y.len());
    let (ranks, _) = pooled_ranks(x, y);
    // doubled mid-ranks are integers
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    // ways[k][s]: subsets of size k with doubled rank sum s
    let mut ways = vec![vec![0.0f64; max_sum + 1]; n1 + 1];
    ways[0][0] = 1.0;
    for &r in &doubled {
        for k in (1..=n1).rev() {
            let (lo, hi) = ways.split_at_mut(k);
            let prev = &lo[k - 1];
            let cur = &mut hi[0];
            for s in (r..=max_sum).rev() {
                cur[s] += prev[s - r];
            }
        }
    }
    let observed: usize = doubled[..n1].iter().sum();
    let expected = n1 * (n + 1); // doubled mean rank sum
    let dev = (observed as i64 - expected as i64).abs();
    let total: f64 = ways[n1].iter().sum();
    let extreme: f64 = ways[n1]
        .iter()
        .enumerate()
        .filter(|(s, _)| (*s as i64 - expected as i64).abs() >= dev)
        .map(|(_, w)| w)
        .sum();
    let r1 = observed as f64 / 2.0;
    Ok(TestResult {
        statistic: r1 - (n1 * (n1 + 1)) as f64 / 2.0,
        p_value: (extreme / total).clamp(0.0, 1.0),
        n,
        method: TestMethod::RankSum,
        exact: true,
    })
}

/// Rank-sum test with the tie-corrected normal approximation.
pub fn rank_sum_normal(x: &[f64], y: &[f64]) -> Result<TestResult> {
    check_two_samples(x, y)?;
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let n = n1 + n2;
    let (ranks, ties) = pooled_ranks(x, y);
    let r1: f64 = ranks[..x.len()].iter().sum();
    let u = r1 - n1 * (n1 + 1.0) / 2.0;
    let mean = n1 * n2 / 2.0;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_sum(&ties) / (n * (n - 1.0)));
    Ok(TestResult {
        statistic: u,
        p_value: two_sided_normal(u - mean, var.max(0.0).sqrt()),
        n: x.len() + y.len(),
        method: TestMethod::RankSum,
        exact: false,
    })
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped. When every difference is zero the
/// result is degenerate with `p = 1`.
pub fn signed_rank(x: &[f64], y: &[f64]) -> Result<TestResult> {
    let diffs = paired_differences(x, y)?;
    if diffs.len() <= SIGNED_RANK_EXACT_MAX {
        Ok(signed_rank_exact_from(&diffs))
    } else {
        Ok(signed_rank_normal_from(&diffs))
    }
}

/// Signed-rank test forced onto the normal approximation.
pub fn signed_rank_normal(x: &[f64], y: &[f64]) -> Result<TestResult> {
    Ok(signed_rank_normal_from(&paired_differences(x, y)?))
}

/// Signed-rank test forced onto exact enumeration.
pub fn signed_rank_exact(x: &[f64], y: &[f64]) -> Result<TestResult> {
    Ok(signed_rank_exact_from(&paired_differences(x, y)?))
}

fn paired_differences(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(StatsError::Argument(format!(
            "signed-rank needs paired samples, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::Argument("signed-rank samples must be finite".into()));
    }
    Ok(x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect())
}

fn degenerate_signed_rank() -> TestResult {
    TestResult {
        statistic: 0.0,
        p_value: 1.0,
        n: 0,
        method: TestMethod::SignedRank,
        exact: true,
    }
}

fn signed_rank_exact_from(diffs: &[f64]) -> TestResult {
    if diffs.is_empty() {
        return degenerate_signed_rank();
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, _) = midranks(&abs);
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut ways = vec![0.0f64; total + 1];
    ways[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            ways[s] += ways[s - r];
        }
    }
    let observed: usize = doubled
        .iter()
        .zip(diffs)
        .filter(|(_, d)| **d > 0.0)
        .map(|(r, _)| *r)
        .sum();
    // compare 2*s against total to stay in integers
    let dev = (2 * observed as i64 - total as i64).abs();
    let count: f64 = ways.iter().sum();
    let extreme: f64 = ways
        .iter()
        .enumerate()
        .filter(|(s, _)| (2 * *s as i64 - total as i64).abs() >= dev)
        .map(|(_, w)| w)
        .sum();
    TestResult {
        statistic: observed as f64 / 2.0,
        p_value: (extreme / count).clamp(0.0, 1.0),
        n: diffs.len(),
        method: TestMethod::SignedRank,
        exact: true,
    }
}

fn signed_rank_normal_from(diffs: &[f64]) -> TestResult {
    if diffs.is_empty() {
        return degenerate_signed_rank();
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = midranks(&abs);
    let v: f64 = ranks.iter().zip(diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let n = diffs.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_sum(&ties) / 48.0;
    TestResult {
        statistic: v,
        p_value: two_sided_normal(v - mean, var.max(0.0).sqrt()),
        n: diffs.len(),
        method: TestMethod::SignedRank,
        exact: false,
    }
}

/// Pearson correlation with a two-sided Student-t p-value.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<TestResult> {
    if x.len() != y.len() {
        return Err(StatsError::Argument("pearson needs equal-length samples".into()));
    }
    if x.len() < 3 {
        return Err(StatsError::Argument("pearson needs at least 3 pairs".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(StatsError::Argument("pearson needs non-zero variance on both sides".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = n - 2.0;
    let p = if (1.0 - r.abs()) < 1e-15 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(TestResult {
        statistic: r,
        p_value: p,
        n: x.len(),
        method: TestMethod::Pearson,
        exact: false,
    })
}

/// One point of an ROC curve, produced by thresholding at `threshold`
/// (scores `>= threshold` are called positive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    pub auc: f64,
    pub points: Vec<RocPoint>,
}

/// Tie-aware AUC (via the rank statistic) and the ROC curve with one point
/// per distinct score, from the strictest threshold to the most lenient.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<Roc> {
    if scores.len() != labels.len() {
        return Err(StatsError::Argument("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(StatsError::Argument("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(StatsError::Argument("ROC needs both classes present".into()));
    }
    let (ranks, _) = midranks(scores);
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, l)| **l).map(|(r, _)| r).sum();
    let (np, nn) = (n_pos as f64, n_neg as f64);
    let auc = (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / nn,
            tpr: tp as f64 / np,
        });
    }
    Ok(Roc { auc, points })
}

/// Sample quantile with linear interpolation between order statistics
/// (the default "type 7" definition). `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let q = q.clamp(0.0, 1.0);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample variance with the n-1 denominator.
pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() as f64 - 1.0)
}

/// Central percentile interval holding `level` of the mass, e.g. 0.95.
pub fn percentile_interval(values: &[f64], level: f64) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    (quantile_sorted(&v, tail), quantile_sorted(&v, 1.0 - tail))
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rank_sum_separated_triplets_exact() {
        // 2 of the 20 equally likely rank assignments are as extreme
        let r = rank_sum(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!(r.exact);
        assert_abs_diff_eq!(r.p_value, 0.1, epsilon = 1e-15);
        assert_eq!(r.statistic, 0.0);
    }

    #[test]
    fn rank_sum_identical_samples_is_centered() {
        let x = [3.0, 1.0, 4.0, 1.0, 5.0];
        let r = rank_sum(&x, &x).unwrap();
        assert_abs_diff_eq!(r.p_value, 1.0, epsilon = 1e-12);
        let big: Vec<f64> = (0..40).map(|i| (i % 7) as f64).collect();
        let r = rank_sum(&big, &big).unwrap();
        assert!(!r.exact);
        assert_abs_diff_eq!(r.p_value, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rank_sum_rejects_empty() {
        assert!(rank_sum(&[], &[1.0]).is_err());
        assert!(rank_sum(&[1.0], &[]).is_err());
    }

    #[test]
    fn exact_and_normal_agree_at_crossover() {
        let x: Vec<f64> = (0..10).map(|i| (i * 3 % 10) as f64 + 0.25).collect();
        let y: Vec<f64> = (0..10).map(|i| (i * 7 % 10) as f64 + 2.0).collect();
        let e = rank_sum_exact(&x, &y).unwrap();
        let a = rank_sum_normal(&x, &y).unwrap();
        assert!((e.p_value - a.p_value).abs() < 0.01, "{} vs {}", e.p_value, a.p_value);
    }

    #[test]
    fn signed_rank_all_positive_shift() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y: Vec<f64> = x.iter().map(|v| v + 10.0).collect();
        let r = signed_rank(&x, &y).unwrap();
        assert_abs_diff_eq!(r.p_value, 0.03125, epsilon = 1e-15);
        let r = signed_rank(&y, &x).unwrap();
        assert_abs_diff_eq!(r.p_value, 0.03125, epsilon = 1e-15);
        assert_eq!(r.statistic, 21.0);
    }

    #[test]
    fn signed_rank_identity_is_degenerate() {
        let x = [1.0, 2.0, 2.0];
        let r = signed_rank(&x, &x).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.n, 0);
        assert!(signed_rank(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn signed_rank_branches_agree_near_crossover() {
        let x: Vec<f64> = (0..25).map(|i| ((i * 37) % 23) as f64 - 9.5).collect();
        let zero = vec![0.0; 25];
        let e = signed_rank_exact(&x, &zero).unwrap();
        let a = signed_rank_normal(&x, &zero).unwrap();
        assert!((e.p_value - a.p_value).abs() < 0.01, "{} vs {}", e.p_value, a.p_value);
    }

    #[test]
    fn pearson_linear_and_errors() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let r = pearson(&x, &y).unwrap();
        assert_abs_diff_eq!(r.statistic, 1.0, epsilon = 1e-12);
        assert_eq!(r.p_value, 0.0);
        assert!(pearson(&x, &vec![1.0; 10]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn pearson_p_value_matches_known_case() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [1.0, 3.0, 2.0, 4.0];
        let r = pearson(&x, &y).unwrap();
        assert_abs_diff_eq!(r.statistic, 0.8, epsilon = 1e-12);
        // t = 0.8 * sqrt(2 / 0.36) = 1.8856, df = 2
        assert_abs_diff_eq!(r.p_value, 0.2, epsilon = 1e-9);
    }

    #[test]
    fn auc_fixture_and_degenerate_cases() {
        let r = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(r.auc, 0.75);
        assert_eq!(r.points.first().unwrap().tpr, 0.0);
        assert_eq!(r.points.last().unwrap().fpr, 1.0);
        assert_eq!(r.points.last().unwrap().tpr, 1.0);
        let r = roc_auc(&[0.5; 4], &[false, true, false, true]).unwrap();
        assert_eq!(r.auc, 0.5);
        let r = roc_auc(&[1.0, 2.0, 3.0], &[false, true, true]).unwrap();
        assert_eq!(r.auc, 1.0);
        assert!(roc_auc(&[1.0, 2.0], &[true, true]).is_err());
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(median(&v), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        let (lo, hi) = percentile_interval(&[5.0; 10], 0.95);
        assert_eq!((lo, hi), (5.0, 5.0));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rank_sum_monotone_invariant(
                x in prop::collection::vec(-50i32..50, 1..15),
                y in prop::collection::vec(-50i32..50, 1..15),
            ) {
                let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
                let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
                let tx: Vec<f64> = xf.iter().map(|v| (v / 10.0).exp() * 3.0 + 1.0).collect();
                let ty: Vec<f64> = yf.iter().map(|v| (v / 10.0).exp() * 3.0 + 1.0).collect();
                let a = rank_sum(&xf, &yf).unwrap();
                let b = rank_sum(&tx, &ty).unwrap();
                prop_assert!((a.p_value - b.p_value).abs() < 1e-12);
                prop_assert!((a.statistic - b.statistic).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&a.p_value));
            }

            #[test]
            fn auc_reverses_under_negation(
                pairs in prop::collection::vec((-20i32..20, any::<bool>()), 2..40),
            ) {
                let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
                let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
                prop_assume!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
                let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
                let a = roc_auc(&scores, &labels).unwrap().auc;
                let b = roc_auc(&neg, &labels).unwrap().auc;
                prop_assert!((a - (1.0 - b)).abs() < 1e-12);
            }
        }
    }
}
