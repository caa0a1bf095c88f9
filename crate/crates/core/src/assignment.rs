//! Exact rectangular assignment and Sinkhorn normalization.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense row-major `n × m` cost matrix with `1 ≤ n ≤ m` and finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 {
            return Err(Error::invalid("cost matrix needs at least one row"));
        }
        if rows > cols {
            return Err(Error::invalid(format!(
                "cost matrix has more rows ({rows}) than columns ({cols})"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "cost matrix data has {} entries, expected {}",
                data.len(),
                rows * cols
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite cost at row {}, column {}",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged cost matrix"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Builds from a generator `f(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn cost_of(&self, mapping: &[usize]) -> f64 {
        mapping.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }
}

/// Injective row → column mapping with its total cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub mapping: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn identity(n: usize) -> Self {
        Self {
            mapping: (0..n).collect(),
            total_cost: 0.0,
        }
    }

    /// Column → row inverse of length `cols`; unassigned columns hold `None`.
    pub fn inverse(&self, cols: usize) -> Vec<Option<usize>> {
        let mut inv = vec![None; cols];
        for (i, &j) in self.mapping.iter().enumerate() {
            inv[j] = Some(i);
        }
        inv
    }
}

/// Minimum-cost injective assignment of rows to columns.
///
/// Shortest-augmenting-path Hungarian method with row/column potentials,
/// `O(n² m)`. Among equal-cost optima the lexicographically smallest mapping
/// is returned.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    let (n, m) = (cost.rows, cost.cols);
    // 1-based potentials and matching, slot 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![0.0f64; m + 1];
    let mut used = vec![false; m + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|x| *x = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            let row = &cost.data[(i0 - 1) * m..i0 * m];
            for j in 1..=m {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
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
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut mapping = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            mapping[owner[j] - 1] = j - 1;
        }
    }
    lexicographic_tie_break(cost, &u[1..], &v[1..], &mut mapping);
    let total_cost = cost.cost_of(&mapping);
    Assignment { mapping, total_cost }
}

/// Rewrites an optimal mapping into the lexicographically smallest optimum.
///
/// Only edges with (near) zero reduced cost can take part in an alternative
/// optimum, so rows without such an edge to a smaller column are skipped in
/// a single scan; the alternating-path search runs only when ties exist.
fn lexicographic_tie_break(cost: &CostMatrix, u: &[f64], v: &[f64], mapping: &mut [usize]) {
    let (n, m) = (cost.rows, cost.cols);
    let scale = cost.data.iter().fold(1.0f64, |a, b| a.max(b.abs()));
    let eps = 1e-10 * scale;
    let tight = |i: usize, j: usize| cost.get(i, j) - u[i] - v[j] <= eps;

    for i in 0..n {
        let mut j = 0;
        while j < mapping[i] {
            if tight(i, j) {
                if let Some(path) = rematch_path(cost, mapping, i, j, &tight) {
                    let before = cost.cost_of(mapping);
                    let mut trial = mapping.to_vec();
                    for &(row, col) in &path {
                        trial[row] = col;
                    }
                    if cost.cost_of(&trial) <= before + eps {
                        mapping.copy_from_slice(&trial);
                        // mapping[i] is now j; continue scanning below it.
                        j = 0;
                        continue;
                    }
                }
            }
            j += 1;
        }
    }
    debug_assert!(mapping.iter().all(|&c| c < m));
}

/// Searches for an alternating path that gives row `i` column `target` while
/// keeping rows `< i` fixed. Returns the (row, new column) moves.
fn rematch_path(
    cost: &CostMatrix,
    mapping: &[usize],
    i: usize,
    target: usize,
    tight: &impl Fn(usize, usize) -> bool,
) -> Option<Vec<(usize, usize)>> {
    let m = cost.cols;
    let mut col_owner = vec![None; m];
    for (r, &c) in mapping.iter().enumerate() {
        col_owner[c] = Some(r);
    }
    let freed = mapping[i];
    // parent[c] = column whose owner moves into c; the root `target` is taken by row i.
    let mut parent: Vec<Option<usize>> = vec![None; m];
    let mut visited = vec![false; m];
    let build = |parent: &[Option<usize>], end: usize| {
        let mut moves = Vec::new();
        let mut c = end;
        while let Some(p) = parent[c] {
            moves.push((col_owner[p].expect("interior columns are owned"), c));
            c = p;
        }
        moves.push((i, c));
        moves
    };

    visited[target] = true;
    if col_owner[target].is_none() {
        return Some(build(&parent, target));
    }
    let mut queue = std::collections::VecDeque::from([target]);
    while let Some(c) = queue.pop_front() {
        let displaced = match col_owner[c] {
            Some(r) if r > i => r,
            _ => continue,
        };
        for c2 in 0..m {
            if visited[c2] || !tight(displaced, c2) {
                continue;
            }
            visited[c2] = true;
            parent[c2] = Some(c);
            if c2 == freed || col_owner[c2].is_none() {
                return Some(build(&parent, c2));
            }
            queue.push_back(c2);
        }
    }
    None
}

/// Outcome of [`sinkhorn_normalize`].
#[derive(Debug, Clone)]
pub struct SinkhornOutcome {
    pub matrix: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest `|row sum − 1|` or `|column sum − 1|` at exit.
    pub max_deviation: f64,
}

pub const SINKHORN_DEFAULT_TOL: f64 = 1e-6;
pub const SINKHORN_DEFAULT_MAX_ITERS: usize = 1000;

fn max_marginal_deviation(q: &DMatrix<f64>) -> f64 {
    let rows = q.row_iter().map(|r| (r.sum() - 1.0).abs());
    let cols = q.column_iter().map(|c| (c.sum() - 1.0).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

/// Alternating row/column normalization toward a doubly-stochastic matrix.
///
/// Each iteration normalizes rows and then columns. Zero entries stay zero.
pub fn sinkhorn_normalize(q: &DMatrix<f64>, max_iters: usize, tol: f64) -> Result<SinkhornOutcome> {
    if !q.is_square() || q.nrows() == 0 {
        return Err(Error::invalid("sinkhorn requires a non-empty square matrix"));
    }
    if q.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("sinkhorn input must be finite and non-negative"));
    }
    if q.row_iter().any(|r| r.sum() == 0.0) || q.column_iter().any(|c| c.sum() == 0.0) {
        return Err(Error::NoConvergence(
            "matrix has an all-zero row or column and cannot be made doubly stochastic".into(),
        ));
    }

    let mut s = q.clone();
    let mut deviation = max_marginal_deviation(&s);
    let mut iterations = 0;
    while deviation > tol && iterations < max_iters {
        for mut row in s.row_iter_mut() {
            let sum = row.sum();
            row /= sum;
        }
        for mut col in s.column_iter_mut() {
            let sum = col.sum();
            col /= sum;
        }
        iterations += 1;
        deviation = max_marginal_deviation(&s);
    }
    Ok(SinkhornOutcome {
        matrix: s,
        iterations,
        converged: deviation <= tol,
        max_deviation: deviation,
    })
}
