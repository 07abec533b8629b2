//! Exact minimum-cost bipartite assignment.
//!
//! Square instances are solved with the O(n³) shortest-augmenting-path
//! Hungarian algorithm (potentials form). Rectangular instances are padded
//! to square with dummy rows/columns priced at the unmatch threshold, so a
//! real pairing is only chosen where it beats leaving both sides unmatched.

use crate::matcher::MatchError;

/// Cost matrix between RGB detections (rows) and thermal detections
/// (columns); lower cost means more similar.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: Vec<String>,
    cols: Vec<String>,
    cost: Vec<f64>,
}

impl CostMatrix {
    /// `cost` is row-major with `rows.len() * cols.len()` finite,
    /// nonnegative entries.
    pub fn new(rows: Vec<String>, cols: Vec<String>, cost: Vec<f64>) -> Result<Self, MatchError> {
        if cost.len() != rows.len() * cols.len() {
            return Err(MatchError::BadCostMatrix {
                message: format!(
                    "expected {}x{}={} entries, got {}",
                    rows.len(),
                    cols.len(),
                    rows.len() * cols.len(),
                    cost.len()
                ),
            });
        }
        if let Some(bad) = cost.iter().find(|c| !c.is_finite() || **c < 0.0) {
            return Err(MatchError::BadCostMatrix {
                message: format!("entries must be finite and nonnegative, got {bad}"),
            });
        }
        Ok(CostMatrix { rows, cols, cost })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }

    pub fn row_ids(&self) -> &[String] {
        &self.rows
    }

    pub fn col_ids(&self) -> &[String] {
        &self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.cost[row * self.cols.len() + col]
    }

    /// Minimum-cost assignment honoring the unmatch threshold `tau`:
    /// rectangular instances are padded with `tau`-cost dummy entries, and
    /// selected pairs costing more than `tau` are dropped to unmatched.
    /// With `tau = inf` and a square matrix this is the plain full
    /// assignment.
    pub fn assign(&self, tau: f64) -> Vec<(usize, usize)> {
        let (n, m) = (self.n_rows(), self.n_cols());
        if n == 0 || m == 0 {
            return Vec::new();
        }
        let row_of = if n == m && !tau.is_finite() {
            solve_square(
                &(0..n)
                    .map(|i| (0..m).map(|j| self.get(i, j)).collect())
                    .collect::<Vec<Vec<f64>>>(),
            )
        } else {
            let pad = if tau.is_finite() {
                tau
            } else {
                self.cost.iter().cloned().fold(0.0, f64::max) + 1.0
            };
            let size = n + m;
            let padded: Vec<Vec<f64>> = (0..size)
                .map(|i| {
                    (0..size)
                        .map(|j| match (i < n, j < m) {
                            (true, true) => self.get(i, j),
                            (false, false) => 0.0,
                            _ => pad,
                        })
                        .collect()
                })
                .collect();
            solve_square(&padded)
        };
        let mut pairs = Vec::new();
        for (i, &j) in row_of.iter().enumerate().take(n) {
            if j < m && self.get(i, j) <= tau {
                pairs.push((i, j));
            }
        }
        pairs
    }

    pub fn total_cost(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(i, j)| self.get(i, j)).sum()
    }
}

/// Hungarian algorithm on a square matrix; returns the assigned column per
/// row. Exact for finite inputs.
pub fn solve_square(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    debug_assert!(cost.iter().all(|row| row.len() == n));
    // 1-indexed potentials; p[j] = row currently assigned to column j
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
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Exhaustive-permutation minimum assignment cost; test oracle for small n.
pub fn brute_force_min_cost(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    if n == 0 {
        return 0.0;
    }
    fn recurse(cost: &[Vec<f64>], row: usize, taken: &mut [bool], acc: f64, best: &mut f64) {
        if row == cost.len() {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for col in 0..cost.len() {
            if !taken[col] {
                taken[col] = true;
                recurse(cost, row + 1, taken, acc + cost[row][col], best);
                taken[col] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    recurse(cost, 0, &mut vec![false; n], 0.0, &mut best);
    best
}
