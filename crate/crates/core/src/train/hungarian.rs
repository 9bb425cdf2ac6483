//! Minimum-cost bipartite matching (Kuhn–Munkres with potentials).
//!
//! Queries are rows, ground-truth segments are columns. Whichever side is
//! smaller is fully matched; with more queries than segments the leftover
//! queries come back in `unmatched` and train against the no-object class.

use crate::tensor::{Tensor, TensorError};

/// Injective pairing between queries and ground-truth segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// `(query index, segment index)` pairs sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    /// Queries without a segment, ascending.
    pub unmatched: Vec<usize>,
}

impl MatchResult {
    /// Total cost of the pairing under `cost`, summed in query order.
    pub fn total_cost(&self, cost: &Tensor) -> f64 {
        self.pairs.iter().map(|&(q, g)| cost.at2(q, g)).sum()
    }
}

/// Minimum-total-cost assignment over a `[queries, segments]` cost matrix.
pub fn hungarian_match(cost: &Tensor) -> Result<MatchResult, TensorError> {
    if cost.shape().len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "hungarian_match",
            detail: format!("expected 2-D cost matrix, got {:?}", cost.shape()),
        });
    }
    if !cost.data().iter().all(|v| v.is_finite()) {
        return Err(TensorError::Domain {
            op: "hungarian_match",
            detail: "cost matrix must be finite".into(),
        });
    }
    let (nq, ng) = (cost.rows(), cost.cols());
    if nq == 0 || ng == 0 {
        return Ok(MatchResult { pairs: vec![], unmatched: (0..nq).collect() });
    }

    let pairs = if ng <= nq {
        // every segment gets a query: solve with segments as rows
        let transposed: Vec<f64> =
            (0..ng).flat_map(|g| (0..nq).map(move |q| cost.at2(q, g))).collect();
        let seg_to_query = assign_rows(&transposed, ng, nq);
        let mut pairs: Vec<(usize, usize)> =
            seg_to_query.iter().enumerate().map(|(g, &q)| (q, g)).collect();
        pairs.sort_unstable();
        pairs
    } else {
        // more segments than queries: every query gets a segment
        let query_to_seg = assign_rows(cost.data(), nq, ng);
        query_to_seg.iter().enumerate().map(|(q, &g)| (q, g)).collect()
    };

    let mut matched = vec![false; nq];
    for &(q, _) in &pairs {
        matched[q] = true;
    }
    let unmatched = (0..nq).filter(|&q| !matched[q]).collect();
    Ok(MatchResult { pairs, unmatched })
}

/// Potentials-based assignment for an `n×m` matrix with `n ≤ m`; returns the
/// column chosen for each row. O(n²m).
fn assign_rows(a: &[f64], n: usize, m: usize) -> Vec<usize> {
    debug_assert!(n <= m);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: 1-based row currently matched to column j (0 = free)
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
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
        // augment along the found path
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Exhaustive minimum over all injective pairings; test oracle for small
/// matrices. Every candidate's total is summed in ascending query order, the
/// same canonical order [`MatchResult::total_cost`] uses, so the optima are
/// comparable bit-for-bit.
pub fn brute_force_min_cost(cost: &Tensor) -> f64 {
    let (nq, ng) = (cost.rows(), cost.cols());
    let k = nq.min(ng);
    if k == 0 {
        return 0.0;
    }
    let small_is_rows = nq <= ng;
    let large = if small_is_rows { ng } else { nq };
    let mut best = f64::INFINITY;
    let mut perm = vec![0usize; k];
    let mut used = vec![false; large];
    fn rec(
        cost: &Tensor,
        small_is_rows: bool,
        k: usize,
        large: usize,
        depth: usize,
        used: &mut [bool],
        perm: &mut [usize],
        best: &mut f64,
    ) {
        if depth == k {
            // canonical total: pairs sorted by query (row) index
            let mut pairs: Vec<(usize, usize)> = (0..k)
                .map(|d| if small_is_rows { (d, perm[d]) } else { (perm[d], d) })
                .collect();
            pairs.sort_unstable();
            let total: f64 = pairs.iter().map(|&(q, g)| cost.at2(q, g)).sum();
            if total < *best {
                *best = total;
            }
            return;
        }
        for j in 0..large {
            if used[j] {
                continue;
            }
            used[j] = true;
            perm[depth] = j;
            rec(cost, small_is_rows, k, large, depth + 1, used, perm, best);
            used[j] = false;
        }
    }
    rec(cost, small_is_rows, k, large, 0, &mut used, &mut perm, &mut best);
    best
}
