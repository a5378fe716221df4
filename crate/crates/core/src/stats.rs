//! Summary statistics and rank-based two-sample tests over run results.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::train::{Phase, RunRecord};

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Largest sample size the exact distributions are computed for.
const EXACT_LIMIT: usize = 120;
/// Auto mode uses the exact Wilcoxon distribution up to this many nonzero
/// differences.
pub const WILCOXON_EXACT_MAX_N: usize = 25;
/// Auto mode uses the exact Mann-Whitney distribution up to this pooled size.
pub const MANN_WHITNEY_EXACT_MAX_N: usize = 14;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("input is empty")]
    EmptyInput,
    #[error("paired samples differ in length: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("every paired difference is zero")]
    AllZeroDifferences,
    #[error("input contains a non-finite value")]
    NonFinite,
    #[error("exact distribution not supported for n = {0}")]
    ExactTooLarge(usize),
    #[error("validation loss is zero at epoch {0}")]
    ZeroValidationLoss(usize),
    #[error("run has no epoch with both phases")]
    NoEpochs,
}

pub type Result<T, E = StatsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdDenominator {
    /// Divide by n.
    #[default]
    Population,
    /// Divide by n - 1.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Result<SummaryStats> {
    summarize_with(values, StdDenominator::Population)
}

pub fn summarize_with(values: &[f64], denominator: StdDenominator) -> Result<SummaryStats> {
    check_finite(values)?;
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    let dof = match denominator {
        StdDenominator::Population => n as f64,
        StdDenominator::Sample if n > 1 => (n - 1) as f64,
        StdDenominator::Sample => 1.0,
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
    Ok(SummaryStats { mean, std: (ss / dof).sqrt(), median, n })
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    WilcoxonSignedRank,
    MannWhitneyU,
}

impl TestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::WilcoxonSignedRank => "wilcoxon_signed_rank",
            Self::MannWhitneyU => "mann_whitney_u",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    /// Exact below the size thresholds, normal approximation above.
    #[default]
    Auto,
    Exact,
    Asymptotic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    #[default]
    TwoSided,
    /// `a` tends to be smaller than `b`.
    Less,
    /// `a` tends to be larger than `b`.
    Greater,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TestOptions {
    pub method: PMethod,
    pub alternative: Alternative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub test: TestKind,
    /// Wilcoxon: min(T+, T-) when two-sided, T+ otherwise. Mann-Whitney: U of `a`.
    pub statistic: f64,
    pub p_value: f64,
    pub significant: bool,
    pub n_a: usize,
    pub n_b: usize,
    /// Exact or Asymptotic, after resolving Auto.
    pub method: PMethod,
    pub alternative: Alternative,
}

impl ComparisonResult {
    fn new(test: TestKind, statistic: f64, p: f64, (n_a, n_b): (usize, usize), method: PMethod, opts: TestOptions) -> Self {
        let p_value = p.clamp(0.0, 1.0);
        Self {
            test,
            statistic,
            p_value,
            significant: p_value < SIGNIFICANCE_LEVEL,
            n_a,
            n_b,
            method,
            alternative: opts.alternative,
        }
    }
}

/// Midranks (1-based) of `values`, doubled so they are integers, plus the
/// sizes of the tie groups.
fn doubled_midranks(values: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0u64; values.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end+1, doubled midrank = first + last
        let r2 = (start + 1 + end + 1) as u64;
        for &i in &order[start..=end] {
            ranks[i] = r2;
        }
        ties.push(end - start + 1);
        start = end + 1;
    }
    (ranks, ties)
}

fn tie_term(ties: &[usize]) -> f64 {
    ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum()
}

/// Upper tail of the standard normal.
fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

fn tail_p(lower: u128, upper: u128, total: u128, alt: Alternative) -> f64 {
    let count = match alt {
        Alternative::TwoSided => (2 * lower.min(upper)).min(total),
        Alternative::Less => lower,
        Alternative::Greater => upper,
    };
    count as f64 / total as f64
}

pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<ComparisonResult> {
    wilcoxon_signed_rank_with(a, b, TestOptions::default())
}

/// Wilcoxon signed-rank test on the paired differences `a - b`. Zero
/// differences are dropped before ranking. The exact distribution is the
/// sign-flip distribution of the observed midranks, so it stays exact under
/// ties; the normal approximation applies the tie correction to the variance
/// and no continuity correction.
pub fn wilcoxon_signed_rank_with(a: &[f64], b: &[f64], opts: TestOptions) -> Result<ComparisonResult> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch { a: a.len(), b: b.len() });
    }
    check_finite(a)?;
    check_finite(b)?;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(StatsError::AllZeroDifferences);
    }
    let n = diffs.len();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (r2, ties) = doubled_midranks(&abs);
    let t_plus2: u64 = diffs.iter().zip(&r2).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total2: u64 = r2.iter().sum();
    let t_plus = t_plus2 as f64 / 2.0;
    let t_minus = (total2 - t_plus2) as f64 / 2.0;
    let statistic = match opts.alternative {
        Alternative::TwoSided => t_plus.min(t_minus),
        _ => t_plus,
    };
    let method = resolve(opts.method, n <= WILCOXON_EXACT_MAX_N);
    let p = match method {
        PMethod::Exact => {
            if n > EXACT_LIMIT {
                return Err(StatsError::ExactTooLarge(n));
            }
            // counts[s] = number of sign patterns with doubled T+ = s
            let mut counts = vec![0u128; total2 as usize + 1];
            counts[0] = 1;
            let mut reach = 0usize;
            for &r in &r2 {
                let r = r as usize;
                for s in (0..=reach).rev() {
                    if counts[s] > 0 {
                        counts[s + r] += counts[s];
                    }
                }
                reach += r;
            }
            let t = t_plus2 as usize;
            let lower: u128 = counts[..=t].iter().sum();
            let upper: u128 = counts[t..].iter().sum();
            tail_p(lower, upper, 1u128 << n, opts.alternative)
        }
        _ => {
            let nf = n as f64;
            let mean = nf * (nf + 1.0) / 4.0;
            let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term(&ties) / 48.0;
            if var <= 0.0 {
                1.0
            } else {
                let z = (statistic - mean) / var.sqrt();
                match opts.alternative {
                    Alternative::TwoSided => 2.0 * normal_sf(z.abs()),
                    Alternative::Greater => normal_sf(z),
                    Alternative::Less => normal_sf(-z),
                }
            }
        }
    };
    Ok(ComparisonResult::new(TestKind::WilcoxonSignedRank, statistic, p, (a.len(), b.len()), method, opts))
}

pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<ComparisonResult> {
    mann_whitney_u_with(a, b, TestOptions::default())
}

/// Mann-Whitney U test. The exact distribution enumerates every assignment
/// of the pooled midranks to the two groups; the normal approximation uses
/// the tie-corrected variance with a 0.5 continuity correction.
pub fn mann_whitney_u_with(a: &[f64], b: &[f64], opts: TestOptions) -> Result<ComparisonResult> {
    check_finite(a)?;
    check_finite(b)?;
    let (n1, n2) = (a.len(), b.len());
    let n = n1 + n2;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (r2, ties) = doubled_midranks(&pooled);
    let rank_sum2: u64 = r2[..n1].iter().sum();
    let offset2 = (n1 * (n1 + 1)) as u64;
    let u1 = (rank_sum2 - offset2) as f64 / 2.0;
    let method = resolve(opts.method, n <= MANN_WHITNEY_EXACT_MAX_N);
    let p = match method {
        PMethod::Exact => {
            if n > EXACT_LIMIT {
                return Err(StatsError::ExactTooLarge(n));
            }
            let max_sum: usize = r2.iter().sum::<u64>() as usize;
            // ways[j][s]: subsets of size j with doubled rank sum s
            let mut ways = vec![vec![0u128; max_sum + 1]; n1 + 1];
            ways[0][0] = 1;
            for (seen, &r) in r2.iter().enumerate() {
                let r = r as usize;
                for j in (1..=n1.min(seen + 1)).rev() {
                    let (lo, hi) = ways.split_at_mut(j);
                    for s in (r..=max_sum).rev() {
                        hi[0][s] += lo[j - 1][s - r];
                    }
                }
            }
            let dist = &ways[n1];
            let t = rank_sum2 as usize;
            let total: u128 = dist.iter().sum();
            let lower: u128 = dist[..=t].iter().sum();
            let upper: u128 = dist[t..].iter().sum();
            tail_p(lower, upper, total, opts.alternative)
        }
        _ => {
            let (f1, f2, nf) = (n1 as f64, n2 as f64, n as f64);
            let mu = f1 * f2 / 2.0;
            let var = f1 * f2 / 12.0 * ((nf + 1.0) - tie_term(&ties) / (nf * (nf - 1.0)));
            if var <= 0.0 || n < 2 {
                1.0
            } else {
                let sd = var.sqrt();
                let u2 = f1 * f2 - u1;
                match opts.alternative {
                    Alternative::TwoSided => 2.0 * normal_sf((u1.max(u2) - mu - 0.5) / sd),
                    Alternative::Greater => normal_sf((u1 - mu - 0.5) / sd),
                    Alternative::Less => normal_sf((u2 - mu - 0.5) / sd),
                }
            }
        }
    };
    Ok(ComparisonResult::new(TestKind::MannWhitneyU, u1, p, (n1, n2), method, opts))
}

fn resolve(method: PMethod, small: bool) -> PMethod {
    match method {
        PMethod::Auto if small => PMethod::Exact,
        PMethod::Auto => PMethod::Asymptotic,
        m => m,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSeries {
    pub per_epoch_ratios: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub overfit_flag: bool,
}

/// Train loss over validation loss for every epoch that has both phases.
pub fn train_val_ratio(run: &RunRecord) -> Result<RatioSeries> {
    let mut ratios = Vec::new();
    for t in run.phase(Phase::Train) {
        let Some(v) = run.phase(Phase::Validation).find(|v| v.epoch == t.epoch) else { continue };
        if v.loss == 0.0 {
            return Err(StatsError::ZeroValidationLoss(t.epoch));
        }
        ratios.push(t.loss / v.loss);
    }
    if ratios.is_empty() {
        return Err(StatsError::NoEpochs);
    }
    let s = summarize(&ratios)?;
    Ok(RatioSeries { per_epoch_ratios: ratios, mean: s.mean, std: s.std, overfit_flag: s.mean < 1.0 })
}
