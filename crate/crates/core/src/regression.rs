//! Least-squares kernels behind the synthetic-intervention estimators.
//!
//! The unregularized path solves one minimum-norm least-squares problem per
//! output dimension. The regularized path adds a pairwise group penalty that
//! pulls the per-dimension weight vectors towards each other:
//!
//! ```text
//! (1/|B|) * sum_d ||X_d b_d - y_d||^2  +  lambda * sum_{d1 < d2} ||b_d1 - b_d2||
//! ```
//!
//! and is minimized by normalized subgradient descent with a `1/sqrt(t)`
//! step schedule. Dimensions whose weights meet are fused into one shared
//! vector, which lets large penalties reach the fully shared solution.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::RegressionProblem;

/// Relative singular-value cutoff used when none is configured.
pub const DEFAULT_SVD_CUTOFF: f64 = 1e-12;

const JACOBI_MAX_SWEEPS: usize = 100;
const DIVERGENCE_FACTOR: f64 = 1e6;
/// Iterations between two convergence checks of the best objective.
const CONVERGENCE_WINDOW: usize = 50;

/// One weight vector per output dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub beta: Vec<DVector<f64>>,
}

impl CoefficientSet {
    pub fn dim(&self) -> usize {
        self.beta.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub lambda: f64,
    pub max_iters: usize,
    pub initial_step: f64,
    pub tolerance: f64,
    pub svd_cutoff_factor: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            max_iters: 2000,
            initial_step: 0.1,
            tolerance: 1e-8,
            svd_cutoff_factor: DEFAULT_SVD_CUTOFF,
        }
    }
}

impl SolverSettings {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.initial_step > 0.0
            && self.tolerance > 0.0
            && self.svd_cutoff_factor > 0.0
            && self.max_iters > 0;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !positive {
            return Err(Error::InvalidInput(format!(
                "invalid solver settings {self:?}"
            )));
        }
        Ok(())
    }
}

/// Minimum-norm least-squares solution of `x * beta = y` through the SVD.
///
/// Singular values at or below `cutoff_factor * max(p, q) * sigma_max` are
/// treated as zero.
pub fn least_squares_min_norm(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cutoff_factor: f64,
) -> Result<DVector<f64>> {
    let (p, q) = x.shape();
    if p == 0 || q == 0 || y.len() != p {
        return Err(Error::InvalidInput(format!(
            "least squares shapes {p}x{q} and {} do not agree",
            y.len()
        )));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("least squares input is not finite".into()));
    }
    let tall = p >= q;
    let (w, sigma, v) = if tall {
        jacobi_svd_tall(x)?
    } else {
        jacobi_svd_tall(&x.transpose())?
    };
    let mut beta = DVector::zeros(q);
    let sigma_max = sigma.max();
    if sigma_max <= 0.0 {
        return Ok(beta);
    }
    let threshold = cutoff_factor * p.max(q) as f64 * sigma_max;
    for (j, &s) in sigma.iter().enumerate() {
        if s <= threshold {
            continue;
        }
        if tall {
            // x = sum_j w_j v_j^T with w_j = s_j u_j
            let coef = w.column(j).dot(y) / (s * s);
            beta.axpy(coef, &v.column(j), 1.0);
        } else {
            // x^T = sum_j w_j v_j^T, so x = sum_j v_j w_j^T
            let coef = v.column(j).dot(y) / (s * s);
            beta.axpy(coef, &w.column(j), 1.0);
        }
    }
    Ok(beta)
}

/// Thin SVD of a matrix with at least as many rows as columns by one-sided
/// (Hestenes) Jacobi rotations. Returns `(w, sigma, v)` where the columns of
/// `w` are `sigma_j * u_j`, so `a = w * v^T`.
fn jacobi_svd_tall(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let n = a.ncols();
    let mut w = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    // columns at rounding-noise level are left alone; they fall below any cutoff
    let floor = (f64::EPSILON * (n.max(1) as f64)).powi(2) * a.norm_squared();
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if alpha <= floor || beta <= floor || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NumericalFailure("Jacobi SVD did not converge".into()));
    }
    let sigma = DVector::from_fn(n, |j, _| w.column(j).norm());
    Ok((w, sigma, v))
}

fn rotate(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let (mp, mq) = (m[(i, p)], m[(i, q)]);
        m[(i, p)] = c * mp - s * mq;
        m[(i, q)] = s * mp + c * mq;
    }
}

/// Independent per-dimension fits (one weight vector per output dimension).
pub fn fit_unregularized(problem: &RegressionProblem, cutoff_factor: f64) -> Result<CoefficientSet> {
    let beta = problem
        .x_train
        .iter()
        .zip(&problem.y_train)
        .map(|(x, y)| least_squares_min_norm(x, y, cutoff_factor))
        .collect::<Result<Vec<_>>>()?;
    Ok(CoefficientSet { beta })
}

/// A single weight vector shared by every dimension (flattened regression).
pub fn fit_shared(problem: &RegressionProblem, cutoff_factor: f64) -> Result<DVector<f64>> {
    let (x, y) = problem.stacked();
    least_squares_min_norm(&x, &y, cutoff_factor)
}

fn loss(problem: &RegressionProblem, beta: &[DVector<f64>]) -> f64 {
    let n = problem.n_train() as f64;
    problem
        .x_train
        .iter()
        .zip(&problem.y_train)
        .zip(beta)
        .map(|((x, y), b)| (x * b - y).norm_squared())
        .sum::<f64>()
        / n
}

fn penalty(beta: &[DVector<f64>]) -> f64 {
    let mut total = 0.0;
    for d1 in 0..beta.len() {
        for d2 in d1 + 1..beta.len() {
            total += (&beta[d1] - &beta[d2]).norm();
        }
    }
    total
}

/// Penalized objective; the `1/|B|` factor applies to the loss term only.
pub fn objective(problem: &RegressionProblem, beta: &CoefficientSet, lambda: f64) -> f64 {
    loss(problem, &beta.beta) + lambda * penalty(&beta.beta)
}

fn subgradient(problem: &RegressionProblem, beta: &[DVector<f64>], lambda: f64) -> Vec<DVector<f64>> {
    let scale = 2.0 / problem.n_train() as f64;
    let mut grad: Vec<DVector<f64>> = problem
        .x_train
        .iter()
        .zip(&problem.y_train)
        .zip(beta)
        .map(|((x, y), b)| x.tr_mul(&(x * b - y)) * scale)
        .collect();
    if lambda > 0.0 {
        for d1 in 0..beta.len() {
            for d2 in d1 + 1..beta.len() {
                let diff = &beta[d1] - &beta[d2];
                let norm = diff.norm();
                // zero at a kink
                if norm > 0.0 {
                    let unit = diff * (lambda / norm);
                    grad[d1] += &unit;
                    grad[d2] -= &unit;
                }
            }
        }
    }
    grad
}

/// Subgradient of [`objective`]; pairwise terms contribute zero where two
/// dimensions have identical weights.
pub fn objective_gradient(
    problem: &RegressionProblem,
    beta: &CoefficientSet,
    lambda: f64,
) -> CoefficientSet {
    CoefficientSet {
        beta: subgradient(problem, &beta.beta, lambda),
    }
}

/// Outcome of a regularized fit with its optimization trace.
#[derive(Debug, Clone)]
pub struct RegularizedFit {
    pub coefficients: CoefficientSet,
    pub objective: f64,
    /// Best objective seen after each iteration; entry 0 is the initialization.
    pub best_trace: Vec<f64>,
    /// Groups of dimensions that ended up sharing one weight vector.
    pub groups: Vec<Vec<usize>>,
}

/// Fused iterate: every dimension in `groups[g]` uses `centers[g]`.
struct Fused {
    groups: Vec<Vec<usize>>,
    centers: Vec<DVector<f64>>,
    dim: usize,
}

impl Fused {
    fn expand(&self) -> Vec<DVector<f64>> {
        let mut out = vec![DVector::zeros(0); self.dim];
        for (g, members) in self.groups.iter().enumerate() {
            for &d in members {
                out[d] = self.centers[g].clone();
            }
        }
        out
    }

    fn merged(&self, g1: usize, g2: usize) -> Fused {
        let (w1, w2) = (self.groups[g1].len() as f64, self.groups[g2].len() as f64);
        let center = (&self.centers[g1] * w1 + &self.centers[g2] * w2) / (w1 + w2);
        let mut groups = self.groups.clone();
        let mut centers = self.centers.clone();
        let moved = groups.remove(g2);
        centers.remove(g2);
        groups[g1].extend(moved);
        groups[g1].sort_unstable();
        centers[g1] = center;
        Fused {
            groups,
            centers,
            dim: self.dim,
        }
    }
}

/// Minimizes the penalized objective; see [`fit_regularized_traced`].
pub fn fit_regularized(problem: &RegressionProblem, settings: &SolverSettings) -> Result<CoefficientSet> {
    Ok(fit_regularized_traced(problem, settings)?.coefficients)
}

/// Normalized subgradient descent with `eta_t = initial_step / sqrt(t)`,
/// started from the unregularized fit and returning the best iterate.
/// Fails with `DivergenceDetected` if an iterate's objective exceeds 1e6 times
/// the larger of the initial objective and the objective at zero weights.
///
/// After every step, groups of dimensions closer than the step scale are
/// merged when the merged point has a lower objective. Once all dimensions
/// share one vector the penalty vanishes and the shared least-squares
/// solution is taken directly.
pub fn fit_regularized_traced(
    problem: &RegressionProblem,
    settings: &SolverSettings,
) -> Result<RegularizedFit> {
    settings.validate()?;
    let init = fit_unregularized(problem, settings.svd_cutoff_factor)?;
    let dim = init.dim();
    let lambda = settings.lambda;
    let initial = objective(problem, &init, lambda);
    let singleton = (0..dim).map(|d| vec![d]).collect::<Vec<_>>();
    if lambda == 0.0 || initial == 0.0 || dim < 2 {
        return Ok(RegularizedFit {
            coefficients: init,
            objective: initial,
            best_trace: vec![initial],
            groups: singleton,
        });
    }

    let mut state = Fused {
        groups: singleton,
        centers: init.beta.clone(),
        dim,
    };
    let mut best = init.beta.clone();
    let mut best_obj = initial;
    let mut best_groups = state.groups.clone();
    let mut trace = vec![initial];
    let mut checkpoint = initial;
    let eval = |beta: &[DVector<f64>]| loss(problem, beta) + lambda * penalty(beta);
    // objective at beta = 0; keeps the divergence test meaningful when the
    // initialization is already (numerically) optimal
    let zero_obj = problem.y_train.iter().map(|y| y.norm_squared()).sum::<f64>()
        / problem.n_train() as f64;
    let reference = initial.max(zero_obj);

    for t in 1..=settings.max_iters {
        let grad = subgradient(problem, &state.expand(), lambda);
        let group_grad: Vec<DVector<f64>> = state
            .groups
            .iter()
            .map(|members| {
                members
                    .iter()
                    .skip(1)
                    .fold(grad[members[0]].clone(), |acc, &d| acc + &grad[d])
            })
            .collect();
        let norm = group_grad.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        let eta = settings.initial_step / (t as f64).sqrt();
        for (c, g) in state.centers.iter_mut().zip(&group_grad) {
            c.axpy(-eta / norm, g, 1.0);
        }
        let mut current = eval(&state.expand());
        if !current.is_finite() || current > DIVERGENCE_FACTOR * reference {
            return Err(Error::DivergenceDetected {
                objective: current,
                initial,
            });
        }

        // merge nearby groups while that lowers the objective
        loop {
            let mut pairs = Vec::new();
            for g1 in 0..state.groups.len() {
                for g2 in g1 + 1..state.groups.len() {
                    let dist = (&state.centers[g1] - &state.centers[g2]).norm();
                    if dist <= 2.0 * eta {
                        pairs.push((dist, g1, g2));
                    }
                }
            }
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let accepted = pairs.into_iter().find_map(|(_, g1, g2)| {
                let cand = state.merged(g1, g2);
                let value = eval(&cand.expand());
                (value <= current).then_some((cand, value))
            });
            match accepted {
                Some((cand, value)) => {
                    state = cand;
                    current = value;
                }
                None => break,
            }
        }

        let fully_fused = state.groups.len() == 1;
        if fully_fused {
            let shared = fit_shared(problem, settings.svd_cutoff_factor)?;
            let polished = vec![shared; dim];
            let value = eval(&polished);
            if value <= current {
                state.centers[0] = polished[0].clone();
                current = value;
            }
        }

        if current < best_obj {
            best_obj = current;
            best = state.expand();
            best_groups = state.groups.clone();
        }
        trace.push(best_obj);
        if fully_fused {
            break;
        }
        if t % CONVERGENCE_WINDOW == 0 {
            if checkpoint - best_obj < settings.tolerance {
                break;
            }
            checkpoint = best_obj;
        }
    }

    Ok(RegularizedFit {
        coefficients: CoefficientSet { beta: best },
        objective: best_obj,
        best_trace: trace,
        groups: best_groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{assemble_problem, fixtures, greedy_donor_selection, Direction, TargetQuery};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn f2_problem() -> RegressionProblem {
        let t = fixtures::f2();
        let q = TargetQuery::new(1, 2, Direction::RegressOverA);
        let sel = greedy_donor_selection(&t, &q, 1).unwrap();
        assemble_problem(&t, &q, &sel).unwrap()
    }

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, p: usize, dim: usize) -> RegressionProblem {
        let mut draw = || rng.random_range(-2.0..2.0);
        RegressionProblem {
            x_train: (0..dim).map(|_| DMatrix::from_fn(n, p, |_, _| draw())).collect(),
            y_train: (0..dim).map(|_| DVector::from_fn(n, |_, _| draw())).collect(),
            x_test: (0..dim).map(|_| DVector::from_fn(p, |_, _| draw())).collect(),
        }
    }

    #[test]
    fn identity_system() {
        let b = least_squares_min_norm(&DMatrix::identity(2, 2), &DVector::from_vec(vec![3.0, -1.0]), DEFAULT_SVD_CUTOFF)
            .unwrap();
        assert_abs_diff_eq!(b[0], 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(b[1], -1.0, epsilon = 1e-14);
    }

    #[test]
    fn rank_one_consistent_system_is_min_norm() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 6.0]);
        let y = DVector::from_vec(vec![1.0, 3.0]);
        let b = least_squares_min_norm(&x, &y, DEFAULT_SVD_CUTOFF).unwrap();
        assert_abs_diff_eq!(b[0], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(b[1], 0.4, epsilon = 1e-12);
        // every solution is (1 - 2s, s); none on a fine grid is shorter
        for step in -4000..=4000 {
            let s = step as f64 * 1e-3;
            let alt = DVector::from_vec(vec![1.0 - 2.0 * s, s]);
            assert!((&x * &alt - &y).norm() < 1e-9);
            assert!(b.norm() <= alt.norm() + 1e-12);
        }
    }

    #[test]
    fn zero_operator_gives_zero() {
        let b = least_squares_min_norm(&DMatrix::zeros(3, 2), &DVector::from_element(3, 1.0), DEFAULT_SVD_CUTOFF)
            .unwrap();
        assert_eq!(b.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let r = least_squares_min_norm(&DMatrix::zeros(3, 2), &DVector::zeros(2), DEFAULT_SVD_CUTOFF);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn unregularized_f2() {
        let c = fit_unregularized(&f2_problem(), DEFAULT_SVD_CUTOFF).unwrap();
        assert_abs_diff_eq!(c.beta[0][0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.beta[1][0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_target_gives_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = random_problem(&mut rng, 5, 3, 2);
        p.y_train.iter_mut().for_each(|y| y.fill(0.0));
        let c = fit_unregularized(&p, DEFAULT_SVD_CUTOFF).unwrap();
        assert!(c.beta.iter().all(|b| b.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn single_dimension_matches_flattened() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_problem(&mut rng, 6, 3, 1);
        let per_dim = fit_unregularized(&p, DEFAULT_SVD_CUTOFF).unwrap();
        let shared = fit_shared(&p, DEFAULT_SVD_CUTOFF).unwrap();
        assert_eq!(per_dim.beta[0], shared);
    }

    #[test]
    fn objective_examples() {
        let p = f2_problem();
        let exact = fit_unregularized(&p, DEFAULT_SVD_CUTOFF).unwrap();
        assert_abs_diff_eq!(objective(&p, &exact, 0.0), 0.0, epsilon = 1e-20);

        let same = CoefficientSet {
            beta: vec![DVector::from_vec(vec![0.7]); 2],
        };
        assert_eq!(objective(&p, &same, 0.0), objective(&p, &same, 123.0));

        // zero-residual two-donor problem with b0 = (1,0), b1 = (0,1)
        let x0 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 5.0]);
        let x1 = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -1.0, 4.0]);
        let zp = RegressionProblem {
            y_train: vec![x0.column(0).into_owned(), x1.column(1).into_owned()],
            x_train: vec![x0, x1],
            x_test: vec![DVector::zeros(2); 2],
        };
        let beta = CoefficientSet {
            beta: vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, 1.0])],
        };
        let independent = 2.0 * ((1.0f64 - 0.0).powi(2) + (0.0f64 - 1.0).powi(2)).sqrt();
        assert_abs_diff_eq!(objective(&zp, &beta, 2.0), independent, epsilon = 1e-12);
        assert_abs_diff_eq!(objective(&zp, &beta, 2.0), 2.0 * 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn objective_is_linear_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_problem(&mut rng, 5, 3, 3);
        let b = CoefficientSet {
            beta: (0..3).map(|_| DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0))).collect(),
        };
        let base = objective(&p, &b, 0.0);
        let unit = objective(&p, &b, 1.0) - base;
        for lambda in [1e-9, 1e-3, 0.5, 7.0] {
            assert_abs_diff_eq!(objective(&p, &b, lambda), base + lambda * unit, epsilon = 1e-10 * (1.0 + base));
        }
    }

    #[test]
    fn regularized_lambda_zero_returns_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_problem(&mut rng, 6, 3, 3);
        let a = fit_unregularized(&p, DEFAULT_SVD_CUTOFF).unwrap();
        let b = fit_regularized(&p, &SolverSettings::with_lambda(0.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn regularized_keeps_coinciding_solutions() {
        // every dimension solved exactly by the same weights
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = DVector::from_vec(vec![0.5, -1.5]);
        let x: Vec<DMatrix<f64>> = (0..3)
            .map(|_| DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let p = RegressionProblem {
            y_train: x.iter().map(|m| m * &w).collect(),
            x_train: x,
            x_test: vec![DVector::zeros(2); 3],
        };
        let fit = fit_regularized(&p, &SolverSettings::with_lambda(3.0)).unwrap();
        for b in &fit.beta {
            assert!((b - &w).norm() < 1e-10);
        }
    }

    #[test]
    fn huge_lambda_reaches_shared_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_problem(&mut rng, 8, 3, 2);
        let per_dim = fit_unregularized(&p, DEFAULT_SVD_CUTOFF).unwrap();
        assert!((&per_dim.beta[0] - &per_dim.beta[1]).norm() > 0.1);

        // oracle: normal equations of the stacked system via Cholesky
        let (x, y) = p.stacked();
        let shared = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * y));

        let fit = fit_regularized(&p, &SolverSettings::with_lambda(1e6)).unwrap();
        assert!((&fit.beta[0] - &fit.beta[1]).norm() < 1e-3);
        for b in &fit.beta {
            assert!((b - &shared).norm() / shared.norm() < 1e-2);
        }
    }

    #[test]
    fn huge_lambda_on_f2_matches_stacked_ratio() {
        let fit = fit_regularized(&f2_problem(), &SolverSettings::with_lambda(1e6)).unwrap();
        // stacked scalar regression: sum(xy) / sum(x^2) = 50 / 45
        for b in &fit.beta {
            assert_abs_diff_eq!(b[0], 10.0 / 9.0, epsilon = 1e-2);
        }
    }

    #[test]
    fn best_trace_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for lambda in [0.05, 0.5, 5.0] {
            let p = random_problem(&mut rng, 6, 4, 4);
            let fit = fit_regularized_traced(&p, &SolverSettings::with_lambda(lambda)).unwrap();
            assert!(fit.best_trace.windows(2).all(|w| w[1] <= w[0]));
            let init = fit_unregularized(&p, DEFAULT_SVD_CUTOFF).unwrap();
            assert!(fit.objective <= objective(&p, &init, lambda));
            assert_abs_diff_eq!(fit.objective, objective(&p, &fit.coefficients, lambda), epsilon = 1e-12);
        }
    }

    #[test]
    fn invalid_settings_rejected() {
        let p = f2_problem();
        let bad = SolverSettings {
            initial_step: 0.0,
            ..SolverSettings::default()
        };
        assert!(fit_regularized(&p, &bad).is_err());
        assert!(fit_regularized(&p, &SolverSettings::with_lambda(-1.0)).is_err());
    }

    /// Central differences of the objective, coordinate by coordinate.
    fn finite_difference(p: &RegressionProblem, b: &CoefficientSet, lambda: f64) -> Vec<f64> {
        let h = 1e-6;
        let mut out = Vec::new();
        for d in 0..b.dim() {
            for k in 0..b.beta[d].len() {
                let mut plus = b.clone();
                let mut minus = b.clone();
                plus.beta[d][k] += h;
                minus.beta[d][k] -= h;
                out.push((objective(p, &plus, lambda) - objective(p, &minus, lambda)) / (2.0 * h));
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn residual_is_orthogonal_for_full_rank(seed in any::<u64>(), n in 4usize..10, p in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-3.0..3.0));
            let y = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
            let b = least_squares_min_norm(&x, &y, DEFAULT_SVD_CUTOFF).unwrap();
            let normal = x.tr_mul(&(&x * &b - &y));
            prop_assert!(normal.norm() <= 1e-8 * x.norm() * y.norm());
        }

        #[test]
        fn low_rank_wide_and_tall_systems_are_solved(seed in any::<u64>(), n in 2usize..12, p in 2usize..12, r in 1usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(n, r, |_, _| rng.random_range(-2.0..2.0));
            let b = DMatrix::from_fn(r, p, |_, _| rng.random_range(-2.0..2.0));
            let x = &a * &b;
            let w = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
            let y = &x * &w;
            let beta = least_squares_min_norm(&x, &y, DEFAULT_SVD_CUTOFF).unwrap();
            prop_assert!((&x * &beta - &y).norm() <= 1e-9 * (1.0 + y.norm()));
            // full-rank factors give pinv(a b) = b^T (b b^T)^-1 (a^T a)^-1 a^T
            let left = (a.transpose() * &a).cholesky().unwrap().solve(&(a.transpose() * &y));
            let oracle = b.transpose() * (&b * b.transpose()).cholesky().unwrap().solve(&left);
            prop_assert!((&beta - &oracle).norm() <= 1e-8 * (1.0 + oracle.norm()),
                "{} vs {}", beta, oracle);
        }

        #[test]
        fn rank_deficient_two_variable_min_norm(a in -3.0f64..3.0, c in 0.2f64..3.0, rhs in -3.0f64..3.0) {
            prop_assume!(a.abs() > 0.1);
            // rows (a, c) and (2a, 2c): rank one, consistent
            let x = DMatrix::from_row_slice(2, 2, &[a, c, 2.0 * a, 2.0 * c]);
            let y = DVector::from_vec(vec![rhs, 2.0 * rhs]);
            let b = least_squares_min_norm(&x, &y, DEFAULT_SVD_CUTOFF).unwrap();
            prop_assert!((&x * &b - &y).norm() < 1e-9 * (1.0 + rhs.abs()));
            for step in -200..=200 {
                let s = step as f64 * 0.05;
                let alt = DVector::from_vec(vec![(rhs - c * s) / a, s]);
                prop_assert!(b.norm() <= alt.norm() + 1e-9);
            }
        }

        #[test]
        fn subgradient_matches_finite_differences(seed in any::<u64>(), lambda in 0.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_problem(&mut rng, 5, 3, 3);
            let b = CoefficientSet {
                beta: (0..3).map(|_| DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0))).collect(),
            };
            let analytic: Vec<f64> = objective_gradient(&p, &b, lambda).beta.iter().flat_map(|v| v.iter().copied()).collect();
            let numeric = finite_difference(&p, &b, lambda);
            let err: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!(err <= 1e-5 * scale.max(1e-8));
        }
    }
}
