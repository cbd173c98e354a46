//! Segment-to-token assignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::videodata::Segment;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(segment, token)` pairs in segment order.
    pub pairs: Vec<(usize, usize)>,
    /// Tokens not used by any segment, ascending.
    pub unmatched_tokens: Vec<usize>,
}

impl Assignment {
    pub fn from_pairs(pairs: Vec<(usize, usize)>, num_tokens: usize) -> Result<Self> {
        let mut used = vec![false; num_tokens];
        for &(_, m) in &pairs {
            if m >= num_tokens {
                return Err(Error::Index(format!("token {m} of {num_tokens}")));
            }
            if std::mem::replace(&mut used[m], true) {
                return Err(Error::Validation(format!("token {m} assigned twice")));
            }
        }
        let unmatched_tokens = (0..num_tokens).filter(|&m| !used[m]).collect();
        Ok(Assignment {
            pairs,
            unmatched_tokens,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.pairs.len() + self.unmatched_tokens.len()
    }

    pub fn token_of(&self, segment: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == segment).map(|p| p.1)
    }

    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(n, m)| cost[n][m]).sum()
    }
}

/// Cost of giving `segment` to token `token`: the token's negative log score
/// on the segment label plus the mean negative log attention its frames pay
/// to the token.
///
/// `token_probs` is `M × (S+1)` and `attn` is `T × M`.
pub fn match_cost<S: Scalar>(
    token_probs: &Matrix<S>,
    attn: &Matrix<S>,
    segment: &Segment,
    token: usize,
) -> f64 {
    let p = token_probs[(token, segment.label.index())].widen().max(PROB_FLOOR);
    let len = segment.end - segment.start;
    let a: f64 = (segment.start..segment.end)
        .map(|t| attn[(t, token)].widen().max(PROB_FLOOR).ln())
        .sum();
    -p.ln() - a / len as f64
}

/// `N × M` cost matrix over all segments and tokens.
pub fn cost_matrix<S: Scalar>(
    token_probs: &Matrix<S>,
    attn: &Matrix<S>,
    segments: &[Segment],
) -> Result<Vec<Vec<f64>>> {
    let m = token_probs.rows();
    if segments.len() > m {
        return Err(Error::Capacity {
            segments: segments.len(),
            tokens: m,
        });
    }
    if attn.cols() != m {
        return Err(Error::Shape(format!(
            "attention has {} token columns, token scores have {m} rows",
            attn.cols()
        )));
    }
    for s in segments {
        if s.end > attn.rows() || s.label.index() >= token_probs.cols() {
            return Err(Error::Index(format!(
                "segment {}..{} label {} outside {}x{} outputs",
                s.start,
                s.end,
                s.label.id(),
                attn.rows(),
                token_probs.cols()
            )));
        }
    }
    Ok(segments
        .iter()
        .map(|s| (0..m).map(|t| match_cost(token_probs, attn, s, t)).collect())
        .collect())
}

struct Solution {
    col_of: Vec<usize>,
    total: f64,
    /// Reduced cost `c[i][j] − u[i] − v[j]` of every entry; zero on edges
    /// usable by some optimal assignment.
    reduced: Vec<Vec<f64>>,
}

/// Minimum-cost injective assignment of `rows` to `cols` (rows ≤ columns)
/// by shortest augmenting paths with potentials.
fn hungarian(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> Solution {
    let n = rows.len();
    let m = cols.len();
    let c = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = c(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| c(i + 1, col_of[i] + 1)).sum();
    let reduced = (1..=n)
        .map(|i| (1..=m).map(|j| c(i, j) - u[i] - v[j]).collect())
        .collect();
    Solution {
        col_of,
        total,
        reduced,
    }
}

/// Optimal injective assignment for an `N × M` cost matrix (`N ≤ M`).
///
/// Among optimal assignments the one whose token sequence (in segment
/// order) is lexicographically smallest is returned. Costs are compared
/// with a relative tolerance of 1e-9.
pub fn match_segments(cost: &[Vec<f64>], num_tokens: usize) -> Result<Assignment> {
    let n = cost.len();
    if n > num_tokens {
        return Err(Error::Capacity {
            segments: n,
            tokens: num_tokens,
        });
    }
    for (i, row) in cost.iter().enumerate() {
        if row.len() != num_tokens {
            return Err(Error::Shape(format!(
                "cost row {i} has {} entries, expected {num_tokens}",
                row.len()
            )));
        }
        if row.iter().any(|c| !c.is_finite()) {
            return Err(Error::Input(format!("non-finite cost in row {i}")));
        }
    }
    let all_cols: Vec<usize> = (0..num_tokens).collect();
    let sol = hungarian(cost, &(0..n).collect::<Vec<_>>(), &all_cols);
    let scale = 1.0 + sol.total.abs();
    let tol = 1e-9 * scale;

    // Fix segments one at a time to the smallest token that still admits an
    // optimal completion. Only tight edges can appear in an optimum.
    let mut pairs = Vec::with_capacity(n);
    let mut fixed = 0.0;
    let mut free_cols = all_cols;
    let mut on_path = true;
    for i in 0..n {
        let rest: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for &m in &free_cols {
            if sol.reduced[i][m] > 1e-7 * scale {
                continue;
            }
            if on_path && m == sol.col_of[i] {
                chosen = Some(m);
                break;
            }
            let cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != m).collect();
            let sub = hungarian(cost, &rest, &cols).total;
            if fixed + cost[i][m] + sub <= sol.total + tol {
                chosen = Some(m);
                break;
            }
        }
        let m = chosen.unwrap_or(sol.col_of[i]);
        on_path &= m == sol.col_of[i];
        fixed += cost[i][m];
        free_cols.retain(|&c| c != m);
        pairs.push((i, m));
    }
    Assignment::from_pairs(pairs, num_tokens)
}
