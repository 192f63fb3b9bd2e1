//! Incomplete interaction tensors, donor sets, and regression slices.
//!
//! A tensor holds one `dim`-vector per (a, b) cell of the two interacting
//! sets, plus a mask saying which cells were measured. Every estimator that
//! regresses over one axis goes through the same oriented view, so the
//! `RegressOverB` path on a tensor is the `RegressOverA` path on its
//! transpose, operation for operation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `n_a x n_b x dim` value store with an `n_a x n_b` observation mask.
///
/// Equality compares the shape, the mask and the observed values; whatever
/// sits behind an unobserved cell is ignored.
#[derive(Debug, Clone)]
pub struct IncompleteTensor {
    n_a: usize,
    n_b: usize,
    dim: usize,
    values: Vec<f64>,
    observed: Vec<bool>,
}

impl PartialEq for IncompleteTensor {
    fn eq(&self, other: &Self) -> bool {
        (self.n_a, self.n_b, self.dim) == (other.n_a, other.n_b, other.dim)
            && self.observed == other.observed
            && self.observed_cells().into_iter().all(|(i, j)| self.entry(i, j) == other.entry(i, j))
    }
}

impl IncompleteTensor {
    /// An all-unobserved tensor.
    pub fn new(n_a: usize, n_b: usize, dim: usize) -> Result<Self> {
        if n_a == 0 || n_b == 0 || dim == 0 {
            return Err(Error::InvalidInput(format!(
                "tensor shape {n_a} x {n_b} x {dim} has an empty axis"
            )));
        }
        Ok(Self {
            n_a,
            n_b,
            dim,
            values: vec![0.0; n_a * n_b * dim],
            observed: vec![false; n_a * n_b],
        })
    }

    /// Builds a tensor from a row-major value buffer (`[a][b][d]`) and mask (`[a][b]`).
    /// Values behind unobserved cells are kept but never read.
    pub fn from_parts(
        n_a: usize,
        n_b: usize,
        dim: usize,
        values: Vec<f64>,
        observed: Vec<bool>,
    ) -> Result<Self> {
        let mut t = Self::new(n_a, n_b, dim)?;
        if values.len() != n_a * n_b * dim || observed.len() != n_a * n_b {
            return Err(Error::InvalidInput(format!(
                "buffer lengths ({}, {}) do not match shape {n_a} x {n_b} x {dim}",
                values.len(),
                observed.len()
            )));
        }
        t.values = values;
        t.observed = observed;
        for i in 0..n_a {
            for j in 0..n_b {
                if t.is_observed(i, j) && t.slot(i, j).iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput(format!(
                        "observed cell ({i}, {j}) holds a non-finite value"
                    )));
                }
            }
        }
        Ok(t)
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    pub fn n_b(&self) -> usize {
        self.n_b
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check(&self, i: usize, j: usize) -> Result<()> {
        if i >= self.n_a || j >= self.n_b {
            return Err(Error::IndexOutOfBounds {
                a: i,
                b: j,
                n_a: self.n_a,
                n_b: self.n_b,
            });
        }
        Ok(())
    }

    fn slot(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.n_b + j) * self.dim;
        &self.values[start..start + self.dim]
    }

    /// Panics if `(i, j)` is out of bounds.
    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.observed[i * self.n_b + j]
    }

    /// The measured vector at `(i, j)`, or `None` for a missing cell.
    pub fn entry(&self, i: usize, j: usize) -> Option<&[f64]> {
        if i < self.n_a && j < self.n_b && self.is_observed(i, j) {
            Some(self.slot(i, j))
        } else {
            None
        }
    }

    /// Stores `value` at `(i, j)` and marks the cell observed.
    pub fn set(&mut self, i: usize, j: usize, value: &[f64]) -> Result<()> {
        self.check(i, j)?;
        if value.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "cell ({i}, {j}) has dimension {} but the tensor has {}",
                value.len(),
                self.dim
            )));
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "cell ({i}, {j}) holds a non-finite value"
            )));
        }
        let start = (i * self.n_b + j) * self.dim;
        self.values[start..start + self.dim].copy_from_slice(value);
        self.observed[i * self.n_b + j] = true;
        Ok(())
    }

    /// Flips the mask bit of `(i, j)` without touching its value; returns the old bit.
    pub fn set_observed(&mut self, i: usize, j: usize, observed: bool) -> Result<bool> {
        self.check(i, j)?;
        let idx = i * self.n_b + j;
        Ok(std::mem::replace(&mut self.observed[idx], observed))
    }

    pub fn mask(&self) -> &[bool] {
        &self.observed
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    /// All observed cells in row-major order.
    pub fn observed_cells(&self) -> Vec<(usize, usize)> {
        (0..self.n_a)
            .flat_map(|i| (0..self.n_b).map(move |j| (i, j)))
            .filter(|&(i, j)| self.is_observed(i, j))
            .collect()
    }

    /// Exchanges the A and B axes.
    pub fn transposed(&self) -> Self {
        let mut values = vec![0.0; self.values.len()];
        let mut observed = vec![false; self.observed.len()];
        for i in 0..self.n_a {
            for j in 0..self.n_b {
                let dst = j * self.n_a + i;
                observed[dst] = self.is_observed(i, j);
                values[dst * self.dim..(dst + 1) * self.dim].copy_from_slice(self.slot(i, j));
            }
        }
        Self {
            n_a: self.n_b,
            n_b: self.n_a,
            dim: self.dim,
            values,
            observed,
        }
    }

    /// Applies `f(d, x)` to every observed value.
    pub fn map_observed(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        let mut out = self.clone();
        for (cell, &obs) in self.observed.iter().enumerate() {
            if obs {
                for d in 0..self.dim {
                    let k = cell * self.dim + d;
                    out.values[k] = f(d, self.values[k]);
                }
            }
        }
        out
    }

    /// Restriction to the given A indices (in the given order).
    pub fn select_a(&self, rows: &[usize]) -> Result<Self> {
        let mut out = Self::new(rows.len(), self.n_b, self.dim)?;
        for (new_i, &i) in rows.iter().enumerate() {
            self.check(i, 0)?;
            for j in 0..self.n_b {
                if let Some(v) = self.entry(i, j) {
                    out.set(new_i, j, v)?;
                }
            }
        }
        Ok(out)
    }
}

/// Which axis the donors are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Donors are other elements of A observed with the target's b; GSI(a, b).
    RegressOverA,
    /// Donors are other elements of B observed with the target's a; GSI(b, a).
    RegressOverB,
}

/// A cell to impute and the regression direction to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TargetQuery {
    pub a_index: usize,
    pub b_index: usize,
    pub direction: Direction,
}

impl TargetQuery {
    pub fn new(a_index: usize, b_index: usize, direction: Direction) -> Self {
        Self {
            a_index,
            b_index,
            direction,
        }
    }

    fn validate(&self, t: &IncompleteTensor) -> Result<()> {
        t.check(self.a_index, self.b_index)
    }
}

/// Rows are the donor axis, columns the training axis.
#[derive(Clone, Copy)]
pub(crate) struct Oriented<'a> {
    tensor: &'a IncompleteTensor,
    over_b: bool,
}

impl<'a> Oriented<'a> {
    pub(crate) fn new(tensor: &'a IncompleteTensor, direction: Direction) -> Self {
        Self {
            tensor,
            over_b: direction == Direction::RegressOverB,
        }
    }

    pub(crate) fn rows(&self) -> usize {
        if self.over_b {
            self.tensor.n_b
        } else {
            self.tensor.n_a
        }
    }

    pub(crate) fn cols(&self) -> usize {
        if self.over_b {
            self.tensor.n_a
        } else {
            self.tensor.n_b
        }
    }

    fn cell(&self, r: usize, c: usize) -> (usize, usize) {
        if self.over_b {
            (c, r)
        } else {
            (r, c)
        }
    }

    pub(crate) fn observed(&self, r: usize, c: usize) -> bool {
        let (i, j) = self.cell(r, c);
        self.tensor.is_observed(i, j)
    }

    /// Caller guarantees the cell is observed.
    pub(crate) fn value(&self, r: usize, c: usize) -> &'a [f64] {
        let (i, j) = self.cell(r, c);
        debug_assert!(self.tensor.is_observed(i, j));
        self.tensor.slot(i, j)
    }

    pub(crate) fn row_count(&self, r: usize) -> usize {
        (0..self.cols()).filter(|&c| self.observed(r, c)).count()
    }

    /// (target row, target column) in oriented coordinates.
    pub(crate) fn target(&self, q: &TargetQuery) -> (usize, usize) {
        if self.over_b {
            (q.b_index, q.a_index)
        } else {
            (q.a_index, q.b_index)
        }
    }
}

/// Donors and training columns chosen for one target, in oriented coordinates:
/// donors index A and training columns index B for `RegressOverA`, and the
/// reverse for `RegressOverB`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DonorSelection {
    pub donors: Vec<usize>,
    pub training_columns: Vec<usize>,
}

/// `A(j)` (or `B(i)`): every other index observed alongside the target's fixed index.
pub fn donor_set(tensor: &IncompleteTensor, target: &TargetQuery) -> Result<Vec<usize>> {
    target.validate(tensor)?;
    let view = Oriented::new(tensor, target.direction);
    let (row, col) = view.target(target);
    let donors: Vec<usize> = (0..view.rows())
        .filter(|&r| r != row && view.observed(r, col))
        .collect();
    if donors.is_empty() {
        return Err(Error::EmptyDonorSet);
    }
    Ok(donors)
}

/// Columns observed for every donor and for the target row; never the target column.
pub fn training_columns(
    tensor: &IncompleteTensor,
    target: &TargetQuery,
    donors: &[usize],
) -> Result<Vec<usize>> {
    target.validate(tensor)?;
    if donors.is_empty() {
        return Err(Error::EmptyDonorSet);
    }
    let view = Oriented::new(tensor, target.direction);
    let (row, col) = view.target(target);
    if let Some(&bad) = donors.iter().find(|&&k| k >= view.rows()) {
        return Err(Error::InvalidInput(format!("donor index {bad} out of range")));
    }
    let cols: Vec<usize> = (0..view.cols())
        .filter(|&c| {
            c != col && view.observed(row, c) && donors.iter().all(|&k| view.observed(k, c))
        })
        .collect();
    if cols.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    Ok(cols)
}

/// Adds donors in order of decreasing row coverage until the next one would
/// leave fewer than `k` training columns.
pub fn greedy_donor_selection(
    tensor: &IncompleteTensor,
    target: &TargetQuery,
    k: usize,
) -> Result<DonorSelection> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let mut candidates = donor_set(tensor, target)?;
    let view = Oriented::new(tensor, target.direction);
    let (row, col) = view.target(target);

    let counts: Vec<usize> = (0..view.rows()).map(|r| view.row_count(r)).collect();
    // stable sort keeps ascending index among equal counts
    candidates.sort_by(|&x, &y| counts[y].cmp(&counts[x]));

    let mut columns: Vec<usize> = (0..view.cols())
        .filter(|&c| c != col && view.observed(row, c))
        .collect();
    let mut donors = Vec::new();
    for cand in candidates {
        let next: Vec<usize> = columns
            .iter()
            .copied()
            .filter(|&c| view.observed(cand, c))
            .collect();
        if next.len() < k {
            if donors.is_empty() {
                return Err(Error::InfeasibleK {
                    k,
                    available: next.len(),
                });
            }
            break;
        }
        donors.push(cand);
        columns = next;
    }
    Ok(DonorSelection {
        donors,
        training_columns: columns,
    })
}

/// Per-dimension regression data for one target.
///
/// `x_train[d]` is `|training| x |donors|`, `y_train[d]` has one entry per
/// training column and `x_test[d]` one entry per donor.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionProblem {
    pub x_train: Vec<DMatrix<f64>>,
    pub y_train: Vec<DVector<f64>>,
    pub x_test: Vec<DVector<f64>>,
}

impl RegressionProblem {
    pub fn dim(&self) -> usize {
        self.x_train.len()
    }

    pub fn n_train(&self) -> usize {
        self.y_train.first().map_or(0, |y| y.len())
    }

    pub fn n_donors(&self) -> usize {
        self.x_test.first().map_or(0, |x| x.len())
    }

    /// All dimensions stacked into one system, dimension-major.
    pub fn stacked(&self) -> (DMatrix<f64>, DVector<f64>) {
        let (n, p) = (self.n_train(), self.n_donors());
        let rows = n * self.dim();
        let x = DMatrix::from_fn(rows, p, |r, c| self.x_train[r / n][(r % n, c)]);
        let y = DVector::from_fn(rows, |r, _| self.y_train[r / n][r % n]);
        (x, y)
    }
}

/// Gathers `X_train`, `y_train` and `X_test` for a selection.
pub fn assemble_problem(
    tensor: &IncompleteTensor,
    target: &TargetQuery,
    selection: &DonorSelection,
) -> Result<RegressionProblem> {
    target.validate(tensor)?;
    let view = Oriented::new(tensor, target.direction);
    let (row, col) = view.target(target);
    let (donors, cols) = (&selection.donors, &selection.training_columns);
    if donors.is_empty() || cols.is_empty() {
        return Err(Error::InvalidInput("selection has no donors or no training columns".into()));
    }
    let covered = cols.iter().all(|&c| {
        c != col && view.observed(row, c) && donors.iter().all(|&k| view.observed(k, c))
    }) && donors.iter().all(|&k| k != row && view.observed(k, col));
    if !covered {
        return Err(Error::InvalidInput(
            "selection references unobserved cells".into(),
        ));
    }

    let dim = tensor.dim();
    let x_train = (0..dim)
        .map(|d| DMatrix::from_fn(cols.len(), donors.len(), |c, k| view.value(donors[k], cols[c])[d]))
        .collect();
    let y_train = (0..dim)
        .map(|d| DVector::from_fn(cols.len(), |c, _| view.value(row, cols[c])[d]))
        .collect();
    let x_test = (0..dim)
        .map(|d| DVector::from_fn(donors.len(), |k, _| view.value(donors[k], col)[d]))
        .collect();
    Ok(RegressionProblem {
        x_train,
        y_train,
        x_test,
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::IncompleteTensor;

    /// Two A elements, three B elements, d = 2, target (1, 2) missing.
    pub(crate) fn f2() -> IncompleteTensor {
        let mut t = IncompleteTensor::new(2, 3, 2).unwrap();
        t.set(0, 0, &[1.0, 2.0]).unwrap();
        t.set(0, 1, &[2.0, 6.0]).unwrap();
        t.set(0, 2, &[1.0, 0.0]).unwrap();
        t.set(1, 0, &[2.0, 2.0]).unwrap();
        t.set(1, 1, &[4.0, 6.0]).unwrap();
        t
    }

    pub(crate) fn full(n_a: usize, n_b: usize, dim: usize) -> IncompleteTensor {
        let mut t = IncompleteTensor::new(n_a, n_b, dim).unwrap();
        for i in 0..n_a {
            for j in 0..n_b {
                let v: Vec<f64> = (0..dim).map(|d| (i * 7 + j * 3 + d) as f64 * 0.5).collect();
                t.set(i, j, &v).unwrap();
            }
        }
        t
    }

    pub(crate) fn from_mask(rows: &[&str], dim: usize) -> IncompleteTensor {
        let mut t = IncompleteTensor::new(rows.len(), rows[0].len(), dim).unwrap();
        for (i, r) in rows.iter().enumerate() {
            for (j, ch) in r.chars().enumerate() {
                if ch == 'x' {
                    let v: Vec<f64> = (0..dim).map(|d| (i + 2 * j + d) as f64).collect();
                    t.set(i, j, &v).unwrap();
                }
            }
        }
        t
    }
}
