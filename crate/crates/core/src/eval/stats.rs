use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest sample size handled by exact enumeration.
pub const WILCOXON_MAX_N: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub metric: String,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single value.
    pub std: f64,
}

pub fn aggregate_runs(metric: &str, values: &[f64]) -> Result<RunAggregate> {
    if values.is_empty() {
        return Err(Error::InsufficientInput(format!("no runs for {metric}")));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(RunAggregate {
        metric: metric.to_string(),
        values: values.to_vec(),
        mean,
        std,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Non-zero differences used.
    pub n: usize,
    /// Rank sum of positive differences.
    pub w_plus: f64,
    /// Rank sum of negative differences.
    pub w_minus: f64,
    /// Sign patterns at least as extreme as observed, doubled when two-sided
    /// and capped at `patterns`.
    pub extreme: u64,
    /// `2ⁿ`.
    pub patterns: u64,
    /// `extreme / patterns`.
    pub p_value: f64,
}

/// Ranks `1..=n` of the values with ties sharing their average rank,
/// returned doubled so they stay integral.
fn doubled_ranks(values: &[f64]) -> Vec<u64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // Average of ranks i+1..=j+1, times two.
        let r = (i + 1 + j + 1) as u64;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Exact Wilcoxon signed-rank test on paired differences.
///
/// Zero differences are dropped. The null distribution of the positive rank
/// sum is obtained by enumerating every sign pattern.
pub fn wilcoxon_signed_rank_exact(diffs: &[f64], two_sided: bool) -> Result<WilcoxonResult> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Input("non-finite difference".into()));
    }
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return Err(Error::UndefinedTest("all differences are zero".into()));
    }
    if n > WILCOXON_MAX_N {
        return Err(Error::Input(format!(
            "{n} non-zero differences exceeds exact limit {WILCOXON_MAX_N}"
        )));
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let observed: u64 = nz
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total: u64 = ranks.iter().sum();
    let patterns = 1u64 << n;
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0..patterns {
        let s: u64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        le += u64::from(s <= observed);
        ge += u64::from(s >= observed);
    }
    let extreme = if two_sided {
        (2 * le.min(ge)).min(patterns)
    } else {
        ge
    };
    Ok(WilcoxonResult {
        n,
        w_plus: observed as f64 / 2.0,
        w_minus: (total - observed) as f64 / 2.0,
        extreme,
        patterns,
        p_value: extreme as f64 / patterns as f64,
    })
}

/// Cohen's d with the root-mean-square of the two sample standard deviations
/// as the pooled scale.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientInput(
            "Cohen's d needs at least two values per sample".into(),
        ));
    }
    let sa = aggregate_runs("a", a)?;
    let sb = aggregate_runs("b", b)?;
    let pooled = ((sa.std.powi(2) + sb.std.powi(2)) / 2.0).sqrt();
    let diff = sa.mean - sb.mean;
    if pooled == 0.0 {
        if diff == 0.0 {
            return Ok(0.0);
        }
        return Err(Error::UndefinedTest("both samples have zero variance".into()));
    }
    Ok(diff / pooled)
}
