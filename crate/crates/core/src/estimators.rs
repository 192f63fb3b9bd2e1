//! Imputation estimators behind one configuration type.
//!
//! Baselines average observed entries; SI-A / SI-C fit a single weight
//! vector on the flattened regression; GSI fits one weight vector per output
//! dimension, optionally with the pairwise group penalty.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regression::{fit_regularized, fit_shared, fit_unregularized, SolverSettings};
use crate::tensor::{
    assemble_problem, donor_set, greedy_donor_selection, Direction, IncompleteTensor, TargetQuery,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    MeanOverA,
    MeanOverB,
    TwoWayMean,
    FixedActionEffect,
    SiA,
    SiC,
    GsiAb,
    GsiBa,
    GsiRegAb,
    GsiRegBa,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 10] = [
        EstimatorKind::MeanOverA,
        EstimatorKind::MeanOverB,
        EstimatorKind::TwoWayMean,
        EstimatorKind::FixedActionEffect,
        EstimatorKind::SiA,
        EstimatorKind::SiC,
        EstimatorKind::GsiAb,
        EstimatorKind::GsiBa,
        EstimatorKind::GsiRegAb,
        EstimatorKind::GsiRegBa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::MeanOverA => "mean_over_a",
            EstimatorKind::MeanOverB => "mean_over_b",
            EstimatorKind::TwoWayMean => "two_way_mean",
            EstimatorKind::FixedActionEffect => "fixed_action_effect",
            EstimatorKind::SiA => "si_a",
            EstimatorKind::SiC => "si_c",
            EstimatorKind::GsiAb => "gsi_ab",
            EstimatorKind::GsiBa => "gsi_ba",
            EstimatorKind::GsiRegAb => "gsi_reg_ab",
            EstimatorKind::GsiRegBa => "gsi_reg_ba",
        }
    }

    /// Name used in the literature, with A = actions and B = contexts.
    pub fn display_name(self) -> &'static str {
        match self {
            EstimatorKind::MeanOverA => "Mean over Actions",
            EstimatorKind::MeanOverB => "Mean over Contexts",
            EstimatorKind::TwoWayMean => "Two Way Mean",
            EstimatorKind::FixedActionEffect => "Fixed Action Effect",
            EstimatorKind::SiA => "SI-A",
            EstimatorKind::SiC => "SI-C",
            EstimatorKind::GsiAb => "GSI(a,b)",
            EstimatorKind::GsiBa => "GSI(b,a)",
            EstimatorKind::GsiRegAb => "GSI_lambda(a,b)",
            EstimatorKind::GsiRegBa => "GSI_lambda(b,a)",
        }
    }

    /// Donor axis for the regression estimators.
    pub fn direction(self) -> Option<Direction> {
        match self {
            EstimatorKind::SiA | EstimatorKind::GsiAb | EstimatorKind::GsiRegAb => {
                Some(Direction::RegressOverA)
            }
            EstimatorKind::SiC | EstimatorKind::GsiBa | EstimatorKind::GsiRegBa => {
                Some(Direction::RegressOverB)
            }
            _ => None,
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        let kind = match norm.as_str() {
            "mean_over_a" | "mean_over_actions" => EstimatorKind::MeanOverA,
            "mean_over_b" | "mean_over_contexts" => EstimatorKind::MeanOverB,
            "two_way_mean" => EstimatorKind::TwoWayMean,
            "fixed_action_effect" => EstimatorKind::FixedActionEffect,
            "si_a" => EstimatorKind::SiA,
            "si_c" => EstimatorKind::SiC,
            "gsi_ab" | "gsi" => EstimatorKind::GsiAb,
            "gsi_ba" => EstimatorKind::GsiBa,
            "gsi_reg_ab" | "gsi_lambda_ab" => EstimatorKind::GsiRegAb,
            "gsi_reg_ba" | "gsi_lambda_ba" => EstimatorKind::GsiRegBa,
            _ => return Err(Error::InvalidInput(format!("unknown estimator '{s}'"))),
        };
        Ok(kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    /// Minimum number of training columns kept by greedy donor selection.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub standardize: bool,
    /// Control row of A; required by `FixedActionEffect` only.
    #[serde(default)]
    pub control_index: Option<usize>,
    /// Report name; defaults to the kind's name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

fn default_k() -> usize {
    1
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind) -> Self {
        Self {
            kind,
            k: 1,
            solver: SolverSettings::default(),
            standardize: false,
            control_index: None,
            label: None,
        }
    }

    pub fn fixed_action_effect(control_index: usize) -> Self {
        Self {
            control_index: Some(control_index),
            ..Self::new(EstimatorKind::FixedActionEffect)
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.solver.lambda = lambda;
        self
    }

    pub fn standardized(mut self, on: bool) -> Self {
        self.standardize = on;
        self
    }

    pub fn labeled(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn name(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.kind.name().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidInput("k must be at least 1".into()));
        }
        match (self.kind, self.control_index) {
            (EstimatorKind::FixedActionEffect, None) => {
                return Err(Error::InvalidInput(
                    "fixed_action_effect needs a control index".into(),
                ))
            }
            (EstimatorKind::FixedActionEffect, Some(_)) | (_, None) => {}
            (kind, Some(_)) => {
                return Err(Error::InvalidInput(format!(
                    "control index given for {kind}, which does not use one"
                )))
            }
        }
        self.solver.validate()
    }
}

/// Per-dimension affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Statistics over every observed entry; zero-spread dimensions get std 1.
    pub fn fit(tensor: &IncompleteTensor) -> Self {
        let dim = tensor.dim();
        let cells = tensor.observed_cells();
        let n = cells.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for &(i, j) in &cells {
            for (m, v) in mean.iter_mut().zip(tensor.entry(i, j).unwrap()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for &(i, j) in &cells {
            for d in 0..dim {
                var[d] += (tensor.entry(i, j).unwrap()[d] - mean[d]).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(d, v)| (v - self.mean[d]) / self.std[d])
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(d, v)| v * self.std[d] + self.mean[d])
            .collect()
    }

    pub fn apply_tensor(&self, tensor: &IncompleteTensor) -> IncompleteTensor {
        tensor.map_observed(|d, v| (v - self.mean[d]) / self.std[d])
    }
}

/// An imputed vector and the cells it was derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub estimate: Vec<f64>,
    /// Indices on the donor axis (A for `RegressOverA`/means over A, B otherwise).
    pub donors_used: Vec<usize>,
    /// Indices on the training axis; empty for the mean baselines.
    pub training_columns_used: Vec<usize>,
    /// Present when the estimate was produced on the standardized scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<Standardization>,
}

impl Prediction {
    fn baseline(estimate: Vec<f64>, donors_used: Vec<usize>) -> Self {
        Self {
            estimate,
            donors_used,
            training_columns_used: Vec::new(),
            standardization: None,
        }
    }
}

fn check_target(tensor: &IncompleteTensor, a: usize, b: usize) -> Result<()> {
    if a >= tensor.n_a() || b >= tensor.n_b() {
        return Err(Error::IndexOutOfBounds {
            a,
            b,
            n_a: tensor.n_a(),
            n_b: tensor.n_b(),
        });
    }
    if tensor.is_observed(a, b) {
        return Err(Error::InvalidInput(format!(
            "target ({a}, {b}) is observed; mask it before imputing"
        )));
    }
    Ok(())
}

/// Imputes cell `(a, b)` with the configured estimator.
pub fn estimate(tensor: &IncompleteTensor, (a, b): (usize, usize), config: &EstimatorConfig) -> Result<Prediction> {
    config.validate()?;
    check_target(tensor, a, b)?;
    if config.standardize {
        let stats = Standardization::fit(tensor);
        let scaled = stats.apply_tensor(tensor);
        let mut pred = dispatch(&scaled, a, b, config)?;
        pred.estimate = stats.invert(&pred.estimate);
        pred.standardization = Some(stats);
        Ok(pred)
    } else {
        dispatch(tensor, a, b, config)
    }
}

fn dispatch(tensor: &IncompleteTensor, a: usize, b: usize, config: &EstimatorConfig) -> Result<Prediction> {
    let cutoff = config.solver.svd_cutoff_factor;
    match config.kind {
        EstimatorKind::MeanOverA => mean_over_a(tensor, a, b),
        EstimatorKind::MeanOverB => mean_over_b(tensor, a, b),
        EstimatorKind::TwoWayMean => two_way_mean(tensor, a, b),
        EstimatorKind::FixedActionEffect => {
            // validate() guarantees the control index
            fixed_action_effect(tensor, a, b, config.control_index.unwrap_or_default())
        }
        EstimatorKind::SiA | EstimatorKind::SiC => {
            let dir = config.kind.direction().unwrap();
            si(tensor, &TargetQuery::new(a, b, dir), config.k, cutoff)
        }
        EstimatorKind::GsiAb | EstimatorKind::GsiBa => {
            let dir = config.kind.direction().unwrap();
            gsi(tensor, &TargetQuery::new(a, b, dir), config.k, cutoff)
        }
        EstimatorKind::GsiRegAb | EstimatorKind::GsiRegBa => {
            let dir = config.kind.direction().unwrap();
            gsi_regularized(tensor, &TargetQuery::new(a, b, dir), config.k, &config.solver)
        }
    }
}

fn mean_of(tensor: &IncompleteTensor, cells: impl Iterator<Item = (usize, usize)>) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; tensor.dim()];
    let mut n = 0usize;
    for (i, j) in cells {
        if let Some(v) = tensor.entry(i, j) {
            sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
            n += 1;
        }
    }
    (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect())
}

/// Column mean: average of the observed entries of `b` over other elements of A.
pub fn mean_over_a(tensor: &IncompleteTensor, a: usize, b: usize) -> Result<Prediction> {
    let donors = donor_set(tensor, &TargetQuery::new(a, b, Direction::RegressOverA))?;
    let est = mean_of(tensor, donors.iter().map(|&i| (i, b))).ok_or(Error::EmptyDonorSet)?;
    Ok(Prediction::baseline(est, donors))
}

/// Row mean: average of the observed entries of `a` over other elements of B.
pub fn mean_over_b(tensor: &IncompleteTensor, a: usize, b: usize) -> Result<Prediction> {
    let donors = donor_set(tensor, &TargetQuery::new(a, b, Direction::RegressOverB))?;
    let est = mean_of(tensor, donors.iter().map(|&j| (a, j))).ok_or(Error::EmptyDonorSet)?;
    Ok(Prediction::baseline(est, donors))
}

/// Additive two-way fit: row mean + column mean - grand mean.
pub fn two_way_mean(tensor: &IncompleteTensor, a: usize, b: usize) -> Result<Prediction> {
    let not_target = |&(i, j): &(usize, usize)| (i, j) != (a, b);
    let row = mean_of(tensor, (0..tensor.n_b()).map(|j| (a, j)).filter(not_target))
        .ok_or(Error::EmptyDonorSet)?;
    let col = mean_of(tensor, (0..tensor.n_a()).map(|i| (i, b)).filter(not_target))
        .ok_or(Error::EmptyDonorSet)?;
    let cells = tensor.observed_cells();
    let grand = mean_of(tensor, cells.into_iter().filter(not_target)).ok_or(Error::EmptyDonorSet)?;
    let est = (0..tensor.dim()).map(|d| row[d] + col[d] - grand[d]).collect();
    let donors = (0..tensor.n_a())
        .filter(|&i| i != a && tensor.is_observed(i, b))
        .collect();
    Ok(Prediction::baseline(est, donors))
}

/// Control entry for `b` shifted by the mean offset of row `a` from the control row.
pub fn fixed_action_effect(tensor: &IncompleteTensor, a: usize, b: usize, control: usize) -> Result<Prediction> {
    let missing = |reason: &str| Error::MissingControl {
        control,
        reason: reason.to_string(),
    };
    if control >= tensor.n_a() {
        return Err(missing("index out of range"));
    }
    if control == a {
        return Err(missing("the target row is the control row"));
    }
    let base = tensor
        .entry(control, b)
        .ok_or_else(|| missing("control is unobserved for the target column"))?;
    let shared: Vec<usize> = (0..tensor.n_b())
        .filter(|&j| j != b && tensor.is_observed(a, j) && tensor.is_observed(control, j))
        .collect();
    if shared.is_empty() {
        return Err(missing("no column is observed for both the target and the control"));
    }
    let dim = tensor.dim();
    let mut offset = vec![0.0; dim];
    for &j in &shared {
        let (t, c) = (tensor.entry(a, j).unwrap(), tensor.entry(control, j).unwrap());
        for d in 0..dim {
            offset[d] += t[d] - c[d];
        }
    }
    let n = shared.len() as f64;
    let est = (0..dim).map(|d| base[d] + offset[d] / n).collect();
    Ok(Prediction {
        estimate: est,
        donors_used: vec![control],
        training_columns_used: shared,
        standardization: None,
    })
}

/// SI-A (`RegressOverA`) or SI-C (`RegressOverB`): one weight vector shared by all dimensions.
pub fn si(tensor: &IncompleteTensor, target: &TargetQuery, k: usize, cutoff: f64) -> Result<Prediction> {
    let selection = greedy_donor_selection(tensor, target, k)?;
    let problem = assemble_problem(tensor, target, &selection)?;
    let beta = fit_shared(&problem, cutoff)?;
    let estimate = problem.x_test.iter().map(|x| x.dot(&beta)).collect();
    Ok(Prediction {
        estimate,
        donors_used: selection.donors,
        training_columns_used: selection.training_columns,
        standardization: None,
    })
}

pub fn si_a(tensor: &IncompleteTensor, a: usize, b: usize, k: usize) -> Result<Prediction> {
    si(tensor, &TargetQuery::new(a, b, Direction::RegressOverA), k, crate::regression::DEFAULT_SVD_CUTOFF)
}

pub fn si_c(tensor: &IncompleteTensor, a: usize, b: usize, k: usize) -> Result<Prediction> {
    si(tensor, &TargetQuery::new(a, b, Direction::RegressOverB), k, crate::regression::DEFAULT_SVD_CUTOFF)
}

/// GSI in the query's direction: an independent least-squares fit per dimension.
pub fn gsi(tensor: &IncompleteTensor, target: &TargetQuery, k: usize, cutoff: f64) -> Result<Prediction> {
    let selection = greedy_donor_selection(tensor, target, k)?;
    let problem = assemble_problem(tensor, target, &selection)?;
    let coef = fit_unregularized(&problem, cutoff)?;
    let estimate = problem.x_test.iter().zip(&coef.beta).map(|(x, b)| x.dot(b)).collect();
    Ok(Prediction {
        estimate,
        donors_used: selection.donors,
        training_columns_used: selection.training_columns,
        standardization: None,
    })
}

/// GSI with the pairwise group penalty `solver.lambda`.
pub fn gsi_regularized(
    tensor: &IncompleteTensor,
    target: &TargetQuery,
    k: usize,
    solver: &SolverSettings,
) -> Result<Prediction> {
    let selection = greedy_donor_selection(tensor, target, k)?;
    let problem = assemble_problem(tensor, target, &selection)?;
    let coef = fit_regularized(&problem, solver)?;
    let estimate = problem.x_test.iter().zip(&coef.beta).map(|(x, b)| x.dot(b)).collect();
    Ok(Prediction {
        estimate,
        donors_used: selection.donors,
        training_columns_used: selection.training_columns,
        standardization: None,
    })
}
