//! Exact minimum-cost perfect matching on square f64 cost matrices.
//!
//! Shortest augmenting path with dual potentials, O(n^3). Among equal-cost
//! optima the deterministic column scan order yields the lexicographically
//! lowest-index assignment, so results are reproducible.

use crate::error::{Error, Result};

/// Hard cap on problem size; the cubic solver is meant for small instances.
pub const MAX_ASSIGNMENT_N: usize = 512;

/// Solve the square assignment problem for `cost` (row-major, n x n).
///
/// Returns the column assigned to each row and the total cost recomputed
/// from the original matrix.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> Result<(Vec<usize>, f64)> {
    if n == 0 {
        return Err(Error::InvalidArgument("assignment of size 0".into()));
    }
    if n > MAX_ASSIGNMENT_N {
        return Err(Error::InvalidArgument(format!(
            "assignment size {} exceeds cap {}",
            n, MAX_ASSIGNMENT_N
        )));
    }
    if cost.len() != n * n {
        return Err(Error::shape(
            format!("{} cost entries", n * n),
            format!("{} cost entries", cost.len()),
        ));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost matrix".into()));
    }

    // 1-indexed internals; p[j] = row matched to column j, p[0] = current row.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
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

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    let total = row_to_col
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    Ok((row_to_col, total))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force oracle: enumerate all permutations.
    fn brute_force(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
        fn permute(
            cost: &[f64],
            n: usize,
            taken: &mut Vec<bool>,
            current: &mut Vec<usize>,
            best: &mut (Vec<usize>, f64),
        ) {
            let i = current.len();
            if i == n {
                let total: f64 = current.iter().enumerate().map(|(r, &c)| cost[r * n + c]).sum();
                if total < best.1 {
                    *best = (current.clone(), total);
                }
                return;
            }
            for j in 0..n {
                if !taken[j] {
                    taken[j] = true;
                    current.push(j);
                    permute(cost, n, taken, current, best);
                    current.pop();
                    taken[j] = false;
                }
            }
        }
        let mut best = (Vec::new(), f64::INFINITY);
        permute(cost, n, &mut vec![false; n], &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn known_3x3() {
        let cost = vec![250.0, 400.0, 350.0, 400.0, 600.0, 350.0, 200.0, 400.0, 250.0];
        let (assign, total) = min_cost_assignment(&cost, 3).unwrap();
        assert_eq!(assign, vec![1, 2, 0]);
        assert_eq!(total, 950.0);
    }

    #[test]
    fn matches_brute_force_small() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64) / ((1u64 << 53) as f64)
        };
        for n in 1..=6 {
            for _ in 0..20 {
                let cost: Vec<f64> = (0..n * n).map(|_| next() * 10.0 - 3.0).collect();
                let (_, total) = min_cost_assignment(&cost, n).unwrap();
                let (_, expect) = brute_force(&cost, n);
                assert_eq!(total, expect, "n={}", n);
            }
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(min_cost_assignment(&[], 0).is_err());
        assert!(min_cost_assignment(&[1.0, 2.0], 2).is_err());
        assert!(min_cost_assignment(&[f64::NAN], 1).is_err());
    }
}
