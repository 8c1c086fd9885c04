//! Minimum-cost one-to-one assignment of targets to queries.

use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `(query, target)` pairs sorted by target
    pub pairs: Vec<(usize, usize)>,
    /// queries left without a target, ascending
    pub unmatched: Vec<usize>,
    pub total_cost: f64,
}

impl MatchResult {
    pub fn query_for_target(&self, t: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == t).map(|p| p.0)
    }

    pub fn target_for_query(&self, q: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == q).map(|p| p.1)
    }
}

/// Shortest augmenting path with potentials on a `rows x cols` matrix,
/// `rows <= cols`. Returns the column assigned to each row.
fn solve(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    // 1-based arrays; column 0 is the virtual source
    let a = |i: usize, j: usize| cost[(i - 1) * cols + (j - 1)];
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
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
    let mut col_of_row = vec![0; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            col_of_row[p[j] - 1] = j - 1;
        }
    }
    col_of_row
}

fn optimum(cost: &[f64], rows: usize, cols: usize) -> f64 {
    if rows == 0 {
        return 0.0;
    }
    solve(cost, rows, cols)
        .iter()
        .enumerate()
        .map(|(r, &c)| cost[r * cols + c])
        .sum()
}

/// Optimal assignment of every target (column of `cost[k, t]`) to a
/// distinct query (row). Among optimal assignments the one whose query
/// sequence, read in target order, is lexicographically smallest wins.
pub fn hungarian_match(cost: &Tensor) -> Result<MatchResult> {
    if cost.rank() != 2 {
        return shape_err(format!(
            "cost matrix must be [queries, targets], got {:?}",
            cost.shape()
        ));
    }
    let (k, t) = (cost.shape()[0], cost.shape()[1]);
    if t > k {
        return Err(Error::InvalidArgument(format!(
            "{t} targets exceed {k} queries"
        )));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    // targets as rows
    let mut rows: Vec<f64> = (0..t)
        .flat_map(|j| (0..k).map(move |i| (i, j)))
        .map(|(i, j)| cost.at(&[i, j]))
        .collect();
    let best = optimum(&rows, t, k);
    let tol = 1e-9 * best.abs().max(1.0);
    let big = rows.iter().fold(0.0f64, |m, &x| m.max(x.abs())) * (t as f64 + 1.0) * 4.0 + 1.0;

    // Fix targets in order to the smallest query that keeps the optimum.
    let mut fixed_cost = 0.0;
    let mut assignment = Vec::with_capacity(t);
    for target in 0..t {
        let mut chosen = None;
        for q in 0..k {
            if assignment.contains(&q) {
                continue;
            }
            // remaining targets may not use q or any fixed query
            let rest_rows = t - target - 1;
            let mut sub = Vec::with_capacity(rest_rows * k);
            for r in target + 1..t {
                for c in 0..k {
                    let blocked = c == q || assignment.contains(&c);
                    sub.push(if blocked { big } else { rows[r * k + c] });
                }
            }
            let total = fixed_cost + rows[target * k + q] + optimum(&sub, rest_rows, k);
            if total <= best + tol {
                chosen = Some(q);
                break;
            }
        }
        let q = chosen.expect("some query attains the optimum");
        fixed_cost += rows[target * k + q];
        assignment.push(q);
    }
    rows.clear();
    let pairs: Vec<(usize, usize)> = assignment
        .iter()
        .enumerate()
        .map(|(tg, &q)| (q, tg))
        .collect();
    let unmatched = (0..k).filter(|q| !assignment.contains(q)).collect();
    let total_cost = pairs.iter().map(|&(q, tg)| cost.at(&[q, tg])).sum();
    Ok(MatchResult {
        pairs,
        unmatched,
        total_cost,
    })
}
