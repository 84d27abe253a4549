//! Minimum-cost bipartite assignment via shortest augmenting paths with
//! row/column potentials, `O(n² m)` for `n ≤ m`.

use crate::numerics::Matrix;

/// Assigns every row of `cost` (`n × m`, `n ≤ m`) to a distinct column,
/// minimizing the total. Returns the column of each row.
///
/// Panics if `n > m`; callers transpose first.
pub fn assign_rows(cost: &Matrix) -> Vec<usize> {
    let (n, m) = cost.shape();
    assert!(n <= m, "assign_rows needs rows ≤ cols, got {n}x{m}");
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    // 1-based; p[j] = row matched to column j, 0 when free
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
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
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Minimum-cost matching of any rectangular matrix: the smaller side is
/// fully matched. Returns `(row, col)` pairs sorted by row.
pub fn min_cost_pairs(cost: &Matrix) -> Vec<(usize, usize)> {
    let (n, m) = cost.shape();
    if n == 0 || m == 0 {
        return Vec::new();
    }
    if n <= m {
        assign_rows(cost).into_iter().enumerate().collect()
    } else {
        let mut pairs: Vec<(usize, usize)> = assign_rows(&cost.transpose())
            .into_iter()
            .enumerate()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        pairs
    }
}
