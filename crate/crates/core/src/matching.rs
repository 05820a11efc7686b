//! Minimum-cost one-to-one assignment.

use crate::error::{CmtError, Result};

/// Query/ground-truth pairs; queries not listed are assigned "no object".
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    /// `(query, gt)` sorted by ground-truth index.
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    /// Ground truth matched to each query, if any.
    pub fn targets(&self, n_queries: usize) -> Vec<Option<usize>> {
        let mut t = vec![None; n_queries];
        for &(q, g) in &self.pairs {
            t[q] = Some(g);
        }
        t
    }

    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(q, g)| cost[q][g]).sum()
    }
}

/// Exact Kuhn-Munkres assignment on a `n_q x n_gt` cost matrix (rows are
/// queries). Every ground truth is matched; ties go to the lowest query index.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n_q = cost.len();
    let n_gt = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != n_gt) {
        return Err(CmtError::Matching("ragged cost matrix".into()));
    }
    if n_gt == 0 {
        return Ok(Assignment::default());
    }
    if n_q < n_gt {
        return Err(CmtError::Matching(format!(
            "{n_q} queries cannot cover {n_gt} ground truths"
        )));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(CmtError::Matching("non-finite cost".into()));
    }
    // Shortest augmenting paths with potentials; ground truths are the
    // rows being inserted, queries the columns. Index 0 is a sentinel.
    let (n, m) = (n_gt, n_q);
    let at = |i: usize, j: usize| cost[j - 1][i - 1];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (j - 1, p[j] - 1)).collect();
    pairs.sort_by_key(|&(_, g)| g);
    Ok(Assignment { pairs })
}
