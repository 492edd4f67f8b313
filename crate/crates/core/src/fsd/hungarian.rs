//! Maximum-utility one-to-one assignment (Hungarian algorithm with potentials).

use crate::error::{invalid, Result};

/// One-to-one matching between ground truths (rows) and predictions (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// Matched prediction per ground truth; `None` when the ground truth was
    /// paired with a dummy column.
    pub gt_to_pred: Vec<Option<usize>>,
    pub pred_to_gt: Vec<Option<usize>>,
    /// Sum of utilities of real pairs, accumulated in ground-truth order.
    pub total: f64,
}

/// Solve `max sum utility[i][perm(i)]` over one-to-one assignments.
///
/// The rectangular `G x N` problem is padded with zero-utility dummy rows or
/// columns to a square of side `max(G, N)`. Runs in `O(max(G, N)^3)`. Rows are
/// inserted in index order and column scans pick the first minimum, so equal
/// inputs always yield the same matching.
pub fn hungarian_match(utility: &[Vec<f64>], num_preds: usize) -> Result<Matching> {
    let g = utility.len();
    for row in utility {
        if row.len() != num_preds {
            return invalid("ragged utility matrix");
        }
        if row.iter().any(|v| !v.is_finite()) {
            return invalid("non-finite utility");
        }
    }
    let n = g.max(num_preds);
    let mut gt_to_pred = vec![None; g];
    let mut pred_to_gt = vec![None; num_preds];
    if n == 0 {
        return Ok(Matching {
            gt_to_pred,
            pred_to_gt,
            total: 0.0,
        });
    }
    let cost = |i: usize, j: usize| -> f64 {
        if i < g && j < num_preds {
            -utility[i][j]
        } else {
            0.0
        }
    };
    // 1-based potentials formulation; p[j] is the row matched to column j.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
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
    for j in 1..=n {
        let (row, col) = (p[j] - 1, j - 1);
        if row < g && col < num_preds {
            gt_to_pred[row] = Some(col);
            pred_to_gt[col] = Some(row);
        }
    }
    let total = gt_to_pred
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|j| utility[i][j]))
        .sum();
    Ok(Matching {
        gt_to_pred,
        pred_to_gt,
        total,
    })
}
