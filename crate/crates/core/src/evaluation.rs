//! Mask-and-impute benchmarking, error metrics, paired signed-rank tests and
//! hyperparameter grid search.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimatorConfig};
use crate::tensor::IncompleteTensor;

pub const REPORT_SCHEMA_VERSION: &str = "1.0.0";
pub const NRMSE_NORMALIZER: &str = "population standard deviation of the held-out truth vector";
/// Largest number of non-zero differences handled by the exact null distribution.
pub const EXACT_WILCOXON_MAX_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mae,
    Nrmse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// errors_a tend to be smaller than errors_b
    Less,
    Greater,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    MeanBest,
    MedianBest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Raw,
    Standardized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilcoxonMethod {
    /// Exact for at most [`EXACT_WILCOXON_MAX_N`] non-zero differences.
    Auto,
    Exact,
    Normal,
}

macro_rules! snake_enum_str {
    ($ty:ty, $($variant:path => $name:literal),+ $(,)?) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
                match norm.as_str() {
                    $($name => Ok($variant),)+
                    _ => Err(Error::InvalidInput(format!("unknown value '{s}'"))),
                }
            }
        }
    };
}

snake_enum_str!(Metric, Metric::Mae => "mae", Metric::Nrmse => "nrmse");
snake_enum_str!(
    Alternative,
    Alternative::Less => "less",
    Alternative::Greater => "greater",
    Alternative::TwoSided => "two_sided",
);
snake_enum_str!(Selection, Selection::MeanBest => "mean_best", Selection::MedianBest => "median_best");

/// Mean absolute error over the output dimensions.
///
/// # Panics
/// If the vectors differ in length.
pub fn mae(estimate: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(estimate.len(), truth.len(), "mae: length mismatch");
    if truth.is_empty() {
        return 0.0;
    }
    estimate.iter().zip(truth).map(|(e, t)| (e - t).abs()).sum::<f64>() / truth.len() as f64
}

/// RMSE divided by the population standard deviation of `truth`.
pub fn nrmse(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::InvalidInput("nrmse: length mismatch".into()));
    }
    if truth.is_empty() {
        return Err(Error::DegenerateTruth);
    }
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let std = (truth.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return Err(Error::DegenerateTruth);
    }
    let rmse = (estimate.iter().zip(truth).map(|(e, t)| (e - t).powi(2)).sum::<f64>() / n).sqrt();
    Ok(rmse / std)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of the ranks of the positive differences.
    pub statistic: f64,
    pub p_value: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub exact: bool,
}

/// Paired signed-rank test on `errors_a - errors_b`, choosing the exact null
/// distribution for small samples.
pub fn wilcoxon_signed_rank(errors_a: &[f64], errors_b: &[f64], alternative: Alternative) -> Result<WilcoxonResult> {
    wilcoxon_signed_rank_with(errors_a, errors_b, alternative, WilcoxonMethod::Auto)
}

pub fn wilcoxon_signed_rank_with(
    errors_a: &[f64],
    errors_b: &[f64],
    alternative: Alternative,
    method: WilcoxonMethod,
) -> Result<WilcoxonResult> {
    if errors_a.len() != errors_b.len() {
        return Err(Error::InvalidInput(format!(
            "paired samples differ in length ({} vs {})",
            errors_a.len(),
            errors_b.len()
        )));
    }
    let diffs: Vec<f64> = errors_a
        .iter()
        .zip(errors_b)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidInput("non-finite difference".into()));
    }
    if diffs.is_empty() {
        return Err(Error::AllZeroDifferences);
    }
    let n = diffs.len();
    let (doubled_ranks, tie_sizes) = doubled_average_ranks(&diffs);
    let w2: u64 = diffs
        .iter()
        .zip(&doubled_ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let statistic = w2 as f64 / 2.0;
    let exact = match method {
        WilcoxonMethod::Auto => n <= EXACT_WILCOXON_MAX_N,
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    let (p_less, p_greater) = if exact {
        exact_tails(&doubled_ranks, w2)
    } else {
        normal_tails(n, &tie_sizes, statistic)
    };
    let p_value = match alternative {
        Alternative::Less => p_less,
        Alternative::Greater => p_greater,
        Alternative::TwoSided => (2.0 * p_less.min(p_greater)).min(1.0),
    };
    Ok(WilcoxonResult { statistic, p_value, n, exact })
}

/// Twice the average ranks of |d| (integers even with ties) and the sizes of
/// the tie groups.
fn doubled_average_ranks(diffs: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut ranks = vec![0u64; diffs.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && diffs[order[end]].abs() == diffs[order[start]].abs() {
            end += 1;
        }
        // ranks start+1..=end average to (start + end + 1) / 2
        let doubled = (start + end + 1) as u64;
        for &idx in &order[start..end] {
            ranks[idx] = doubled;
        }
        ties.push(end - start);
        start = end;
    }
    (ranks, ties)
}

/// P(W <= w) and P(W >= w) under the sign-flip null, by counting subsets of
/// doubled ranks per attainable sum.
fn exact_tails(doubled_ranks: &[u64], w2: u64) -> (f64, f64) {
    let total: u64 = doubled_ranks.iter().sum();
    let mut counts = vec![0.0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let all: f64 = counts.iter().sum();
    let w = w2 as usize;
    let less: f64 = counts[..=w].iter().sum();
    let greater: f64 = counts[w..].iter().sum();
    (less / all, greater / all)
}

fn normal_tails(n: usize, tie_sizes: &[usize], statistic: f64) -> (f64, f64) {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = tie_sizes.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    let sd = var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let less = normal.cdf((statistic - mean + 0.5) / sd);
    let greater = normal.sf((statistic - mean - 0.5) / sd);
    (less.min(1.0), greater.min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len().is_multiple_of(2) { 0.5 * (sorted[mid - 1] + sorted[mid]) } else { sorted[mid] };
        Some(Summary { count: values.len(), mean, median, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub a_index: usize,
    pub b_index: usize,
    pub estimator: String,
    /// "ok", or the estimator's failure reason.
    pub status: String,
    pub mae: Option<f64>,
    /// Absent on failure or when the held-out vector is constant.
    pub nrmse: Option<f64>,
    pub scale: Scale,
    pub estimate: Option<Vec<f64>>,
    pub truth: Vec<f64>,
}

impl TargetRecord {
    pub fn succeeded(&self) -> bool {
        self.status == STATUS_OK
    }

    pub fn metric(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Mae => self.mae,
            Metric::Nrmse => self.nrmse,
        }
    }
}

pub const STATUS_OK: &str = "ok";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorAggregate {
    pub estimator: String,
    pub successes: usize,
    pub failures: usize,
    pub mae: Option<Summary>,
    pub nrmse: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub estimator_a: String,
    pub estimator_b: String,
    pub test: String,
    pub metric: Metric,
    pub alternative: Alternative,
    pub statistic: f64,
    pub p_value: f64,
    /// Targets where both estimators produced the metric.
    pub n_pairs: usize,
    pub n_nonzero: usize,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub n_a: usize,
    pub n_b: usize,
    pub dim: usize,
    pub n_targets: usize,
    pub nrmse_normalizer: String,
    pub estimators: Vec<EstimatorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at_unix: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: String,
    pub metadata: ReportMetadata,
    pub per_target: Vec<TargetRecord>,
    pub aggregates: Vec<EstimatorAggregate>,
    pub comparisons: Vec<ComparisonRecord>,
}

impl EvaluationReport {
    pub fn estimator_names(&self) -> Vec<String> {
        self.aggregates.iter().map(|a| a.estimator.clone()).collect()
    }

    pub fn aggregate(&self, estimator: &str) -> Option<&EstimatorAggregate> {
        self.aggregates.iter().find(|a| a.estimator == estimator)
    }

    /// Successful metric values for one estimator in target order.
    pub fn metric_values(&self, estimator: &str, metric: Metric) -> Vec<f64> {
        self.per_target
            .iter()
            .filter(|r| r.estimator == estimator && r.succeeded())
            .filter_map(|r| r.metric(metric))
            .collect()
    }

    /// Paired test over targets where both estimators produced `metric`.
    pub fn compare(
        &self,
        estimator_a: &str,
        estimator_b: &str,
        metric: Metric,
        alternative: Alternative,
    ) -> Result<ComparisonRecord> {
        for name in [estimator_a, estimator_b] {
            if self.aggregate(name).is_none() {
                return Err(Error::InvalidInput(format!("estimator '{name}' not in report")));
            }
        }
        let keyed = |name: &str| -> HashMap<(usize, usize), f64> {
            self.per_target
                .iter()
                .filter(|r| r.estimator == name && r.succeeded())
                .filter_map(|r| r.metric(metric).map(|m| ((r.a_index, r.b_index), m)))
                .collect()
        };
        let map_b = keyed(estimator_b);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for r in self.per_target.iter().filter(|r| r.estimator == estimator_a && r.succeeded()) {
            let key = (r.a_index, r.b_index);
            if let (Some(x), Some(y)) = (r.metric(metric), map_b.get(&key)) {
                if seen.insert(key) {
                    xs.push(x);
                    ys.push(*y);
                }
            }
        }
        if xs.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no target where both '{estimator_a}' and '{estimator_b}' succeeded"
            )));
        }
        let w = wilcoxon_signed_rank(&xs, &ys, alternative)?;
        Ok(ComparisonRecord {
            estimator_a: estimator_a.to_string(),
            estimator_b: estimator_b.to_string(),
            test: "wilcoxon_signed_rank".into(),
            metric,
            alternative,
            statistic: w.statistic,
            p_value: w.p_value,
            n_pairs: xs.len(),
            n_nonzero: w.n,
            exact: w.exact,
        })
    }
}

/// Observed cells whose A index is listed, for restricting a sweep to a split.
pub fn targets_in_rows(tensor: &IncompleteTensor, rows: &[usize]) -> Vec<(usize, usize)> {
    let keep: std::collections::HashSet<usize> = rows.iter().copied().collect();
    tensor.observed_cells().into_iter().filter(|(a, _)| keep.contains(a)).collect()
}

/// Hides each target in turn, runs every config and scores against the
/// hidden value. Targets default to all observed cells. Failures are recorded
/// per record; the input tensor is never modified.
pub fn mask_and_impute(
    tensor: &IncompleteTensor,
    configs: &[EstimatorConfig],
    targets: Option<&[(usize, usize)]>,
) -> EvaluationReport {
    let owned;
    let targets = match targets {
        Some(t) => t,
        None => {
            owned = tensor.observed_cells();
            &owned
        }
    };
    let per_target: Vec<TargetRecord> = targets
        .par_iter()
        .map_init(|| tensor.clone(), |work, &(a, b)| evaluate_target(work, configs, a, b))
        .flatten_iter()
        .collect();
    let aggregates = configs
        .iter()
        .map(|c| aggregate_for(&c.name(), &per_target))
        .collect();
    EvaluationReport {
        schema_version: REPORT_SCHEMA_VERSION.into(),
        metadata: ReportMetadata {
            n_a: tensor.n_a(),
            n_b: tensor.n_b(),
            dim: tensor.dim(),
            n_targets: targets.len(),
            nrmse_normalizer: NRMSE_NORMALIZER.into(),
            estimators: configs.to_vec(),
            generated_at_unix: None,
            seed: None,
            dataset: None,
        },
        per_target,
        aggregates,
        comparisons: Vec::new(),
    }
}

fn evaluate_target(work: &mut IncompleteTensor, configs: &[EstimatorConfig], a: usize, b: usize) -> Vec<TargetRecord> {
    let failed = |status: String, truth: Vec<f64>| -> Vec<TargetRecord> {
        configs
            .iter()
            .map(|c| TargetRecord {
                a_index: a,
                b_index: b,
                estimator: c.name(),
                status: status.clone(),
                mae: None,
                nrmse: None,
                scale: scale_of(c),
                estimate: None,
                truth: truth.clone(),
            })
            .collect()
    };
    let truth = match work.entry(a, b) {
        Some(v) => v.to_vec(),
        None if a < work.n_a() && b < work.n_b() => {
            return failed("target is not observed".into(), Vec::new());
        }
        None => {
            let e = Error::IndexOutOfBounds { a, b, n_a: work.n_a(), n_b: work.n_b() };
            return failed(e.to_string(), Vec::new());
        }
    };
    // entry() returned Some, so the bounds are valid
    work.set_observed(a, b, false).expect("in bounds");
    let records = configs
        .iter()
        .map(|config| {
            let mut record = TargetRecord {
                a_index: a,
                b_index: b,
                estimator: config.name(),
                status: STATUS_OK.into(),
                mae: None,
                nrmse: None,
                scale: scale_of(config),
                estimate: None,
                truth: truth.clone(),
            };
            match estimate(work, (a, b), config) {
                Ok(pred) if pred.estimate.iter().all(|x| x.is_finite()) => {
                    let (est_s, truth_s) = match &pred.standardization {
                        Some(stats) => (stats.apply(&pred.estimate), stats.apply(&truth)),
                        None => (pred.estimate.clone(), truth.clone()),
                    };
                    record.mae = Some(mae(&est_s, &truth_s));
                    record.nrmse = nrmse(&est_s, &truth_s).ok();
                    record.estimate = Some(pred.estimate);
                }
                Ok(_) => record.status = "non-finite estimate".into(),
                Err(e) => record.status = e.to_string(),
            }
            record
        })
        .collect();
    work.set_observed(a, b, true).expect("in bounds");
    records
}

fn scale_of(config: &EstimatorConfig) -> Scale {
    if config.standardize {
        Scale::Standardized
    } else {
        Scale::Raw
    }
}

fn aggregate_for(name: &str, records: &[TargetRecord]) -> EstimatorAggregate {
    let mine: Vec<&TargetRecord> = records.iter().filter(|r| r.estimator == name).collect();
    let ok: Vec<&&TargetRecord> = mine.iter().filter(|r| r.succeeded()).collect();
    let maes: Vec<f64> = ok.iter().filter_map(|r| r.mae).collect();
    let nrmses: Vec<f64> = ok.iter().filter_map(|r| r.nrmse).collect();
    EstimatorAggregate {
        estimator: name.to_string(),
        successes: ok.len(),
        failures: mine.len() - ok.len(),
        mae: Summary::of(&maes),
        nrmse: Summary::of(&nrmses),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchSpec {
    pub k_values: Vec<usize>,
    pub lambda_values: Vec<f64>,
    pub metric: Metric,
    pub selection: Selection,
}

impl GridSearchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() || self.lambda_values.is_empty() {
            return Err(Error::InvalidInput("grid lists must be non-empty".into()));
        }
        if self.k_values.contains(&0) {
            return Err(Error::InvalidInput("k values must be positive".into()));
        }
        if self.lambda_values.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidInput("lambda values must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub k: usize,
    pub lambda: f64,
    /// None when no target succeeded.
    pub score: Option<f64>,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best_k: usize,
    pub best_lambda: f64,
    pub best_score: f64,
    pub table: Vec<GridCell>,
}

/// Scores every (k, lambda) pair by a mask-and-impute sweep and returns the
/// best one; ties go to the smaller k, then the smaller lambda.
pub fn grid_search(
    tensor: &IncompleteTensor,
    base_config: &EstimatorConfig,
    spec: &GridSearchSpec,
    targets: Option<&[(usize, usize)]>,
) -> Result<GridSearchResult> {
    spec.validate()?;
    let mut ks = spec.k_values.clone();
    ks.sort_unstable();
    ks.dedup();
    let mut lambdas = spec.lambda_values.clone();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();

    let mut table = Vec::new();
    let mut best: Option<(usize, f64, f64)> = None;
    for &k in &ks {
        for &lambda in &lambdas {
            let config = base_config.clone().with_k(k).with_lambda(lambda);
            config.validate()?;
            let report = mask_and_impute(tensor, std::slice::from_ref(&config), targets);
            let agg = &report.aggregates[0];
            let summary = match spec.metric {
                Metric::Mae => agg.mae,
                Metric::Nrmse => agg.nrmse,
            };
            let score = summary.map(|s| match spec.selection {
                Selection::MeanBest => s.mean,
                Selection::MedianBest => s.median,
            });
            if let Some(s) = score {
                if best.is_none_or(|(_, _, b)| s < b) {
                    best = Some((k, lambda, s));
                }
            }
            table.push(GridCell { k, lambda, score, successes: agg.successes, failures: agg.failures });
        }
    }
    let (best_k, best_lambda, best_score) =
        best.ok_or_else(|| Error::InvalidInput("no grid point produced a successful estimate".into()))?;
    Ok(GridSearchResult { best_k, best_lambda, best_score, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::EstimatorKind;
    use crate::synthgen::{generate, ModelKind, SyntheticSpec};
    use crate::tensor::fixtures;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// P-values by enumerating every sign assignment of the average ranks.
    fn brute_force_p(a: &[f64], b: &[f64], alternative: Alternative) -> (f64, f64) {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
        let n = d.len();
        let ranks: Vec<f64> = d
            .iter()
            .map(|x| {
                let less = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
                let equal = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect();
        let w: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
        let (mut le, mut ge) = (0u64, 0u64);
        for pattern in 0u64..(1 << n) {
            let s: f64 = (0..n).filter(|i| pattern >> i & 1 == 1).map(|i| ranks[i]).sum();
            if s <= w + 1e-9 {
                le += 1;
            }
            if s >= w - 1e-9 {
                ge += 1;
            }
        }
        let total = (1u64 << n) as f64;
        let (pl, pg) = (le as f64 / total, ge as f64 / total);
        let p = match alternative {
            Alternative::Less => pl,
            Alternative::Greater => pg,
            Alternative::TwoSided => (2.0 * pl.min(pg)).min(1.0),
        };
        (w, p)
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_abs_diff_eq!(mae(&[1.0, 3.0], &[2.0, 1.0]), 1.5);
    }

    #[test]
    fn nrmse_examples() {
        assert_eq!(nrmse(&[1.0, 4.0, 2.0], &[1.0, 4.0, 2.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(nrmse(&[1.0, 1.0], &[0.0, 2.0]).unwrap(), 1.0);
        let truth = [0.5, -1.0, 3.0, 2.0];
        let n = truth.len() as f64;
        let mean = truth.iter().sum::<f64>() / n;
        let std = (truth.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n).sqrt();
        let shifted: Vec<f64> = truth.iter().map(|t| t - 0.7).collect();
        assert_abs_diff_eq!(nrmse(&shifted, &truth).unwrap(), 0.7 / std, epsilon = 1e-12);
        assert_eq!(nrmse(&[1.0, 2.0], &[3.0, 3.0]), Err(Error::DegenerateTruth));
    }

    #[test]
    fn wilcoxon_all_below_n12() {
        let a: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 1.0 + 0.1 * x).collect();
        let r = wilcoxon_signed_rank(&a, &b, Alternative::Less).unwrap();
        assert!(r.exact);
        assert_eq!(r.statistic, 0.0);
        assert_abs_diff_eq!(r.p_value, 2f64.powi(-12), epsilon = 1e-15);
    }

    #[test]
    fn wilcoxon_all_ties_rejected() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(wilcoxon_signed_rank(&a, &a, Alternative::TwoSided), Err(Error::AllZeroDifferences));
        assert!(wilcoxon_signed_rank(&a, &a[..2], Alternative::Less).is_err());
    }

    #[test]
    fn wilcoxon_alternating_six() {
        let a = [1.0, -2.0, 3.0, -4.0, 5.0, -6.0];
        let b = [0.0; 6];
        for alt in [Alternative::Less, Alternative::Greater, Alternative::TwoSided] {
            let r = wilcoxon_signed_rank(&a, &b, alt).unwrap();
            let (w, p) = brute_force_p(&a, &b, alt);
            assert_eq!(r.statistic, w);
            assert_eq!(r.statistic, 9.0);
            assert_abs_diff_eq!(r.p_value, p, epsilon = 1e-12);
        }
    }

    #[test]
    fn wilcoxon_zero_differences_dropped() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 3.0, 3.0, 6.0];
        let r = wilcoxon_signed_rank(&a, &b, Alternative::Less).unwrap();
        assert_eq!(r.n, 2);
        assert_abs_diff_eq!(r.p_value, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn summary_values() {
        let s = Summary::of(&[3.0, 1.0, 2.0, 10.0]).unwrap();
        assert_eq!(s.median, 2.5);
        assert_eq!(s.mean, 4.0);
        assert_abs_diff_eq!(s.std, 12.5f64.sqrt(), epsilon = 1e-12);
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn constant_tensor_means_are_exact() {
        let mut t = fixtures::full(5, 6, 2);
        for a in 0..5 {
            for b in 0..6 {
                t.set(a, b, &[3.0, -1.0]).unwrap();
            }
        }
        let configs: Vec<EstimatorConfig> = [EstimatorKind::MeanOverA, EstimatorKind::MeanOverB, EstimatorKind::TwoWayMean]
            .into_iter()
            .map(EstimatorConfig::new)
            .collect();
        let report = mask_and_impute(&t, &configs, None);
        assert_eq!(report.per_target.len(), 30 * 3);
        for r in &report.per_target {
            assert!(r.succeeded(), "{}", r.status);
            assert_eq!(r.mae, Some(0.0));
            assert_eq!(r.nrmse, Some(0.0));
        }
    }

    #[test]
    fn noiseless_gsi_sweep_is_exact() {
        let spec = SyntheticSpec {
            model: ModelKind::MultiLatent,
            n_a: 10,
            n_b: 12,
            dim: 3,
            rank: 2,
            noise_std: 0.0,
            missing_fraction: 0.1,
            seed: 3,
        };
        let inst = generate(&spec).unwrap();
        let configs = [EstimatorConfig::new(EstimatorKind::GsiAb).with_k(4), EstimatorConfig::new(EstimatorKind::GsiBa).with_k(4)];
        let report = mask_and_impute(&inst.observed_tensor, &configs, None);
        for r in &report.per_target {
            assert!(r.succeeded(), "{:?}", r);
            assert!(r.nrmse.unwrap() < 1e-6, "{:?}", r);
        }
    }

    #[test]
    fn failures_are_recorded_not_fatal() {
        let t = fixtures::f2();
        let configs = [EstimatorConfig::new(EstimatorKind::GsiAb).with_k(50), EstimatorConfig::new(EstimatorKind::MeanOverA)];
        let targets = [(0, 0), (1, 2), (9, 9)];
        let report = mask_and_impute(&t, &configs, Some(&targets));
        assert_eq!(report.per_target.len(), 6);
        assert!(!report.per_target[0].succeeded());
        assert!(report.per_target[1].succeeded());
        assert_eq!(report.per_target[2].status, "target is not observed");
        assert!(report.per_target[4].status.contains("out of bounds"));
        let agg = report.aggregate("mean_over_a").unwrap();
        assert_eq!((agg.successes, agg.failures), (1, 2));
        assert!(report.aggregate("gsi_ab").unwrap().mae.is_none());
    }

    #[test]
    fn standardized_records_use_standardized_scale() {
        let t = fixtures::full(4, 4, 2).map_observed(|d, x| 100.0 * x + d as f64);
        let raw = EstimatorConfig::new(EstimatorKind::MeanOverA);
        let std = EstimatorConfig::new(EstimatorKind::MeanOverA).standardized(true).labeled("mean_std");
        let report = mask_and_impute(&t, &[raw, std], Some(&[(0, 0)]));
        let (r, s) = (&report.per_target[0], &report.per_target[1]);
        assert_eq!((r.scale, s.scale), (Scale::Raw, Scale::Standardized));
        assert_abs_diff_eq!(r.estimate.as_ref().unwrap()[0], s.estimate.as_ref().unwrap()[0], epsilon = 1e-9);
        assert!(s.mae.unwrap() < r.mae.unwrap());
    }

    #[test]
    fn comparison_pairs_only_joint_successes() {
        let t = fixtures::full(6, 6, 2);
        let configs = [EstimatorConfig::new(EstimatorKind::MeanOverA), EstimatorConfig::new(EstimatorKind::TwoWayMean)];
        let mut report = mask_and_impute(&t, &configs, None);
        report.per_target[0].status = "forced failure".into();
        let c = report.compare("mean_over_a", "two_way_mean", Metric::Mae, Alternative::TwoSided).unwrap();
        assert_eq!(c.n_pairs, 35);
        assert!(report.compare("mean_over_a", "nope", Metric::Mae, Alternative::Less).is_err());
    }

    #[test]
    fn singleton_grid() {
        let t = fixtures::full(5, 5, 2);
        let spec = GridSearchSpec { k_values: vec![1], lambda_values: vec![0.0], metric: Metric::Mae, selection: Selection::MeanBest };
        let res = grid_search(&t, &EstimatorConfig::new(EstimatorKind::GsiRegAb), &spec, None).unwrap();
        assert_eq!((res.best_k, res.best_lambda), (1, 0.0));
        assert_eq!(res.table.len(), 1);
    }

    #[test]
    fn grid_ties_go_to_smaller_k() {
        // the means ignore k and lambda, so every cell ties
        let t = fixtures::full(5, 5, 2);
        let spec = GridSearchSpec {
            k_values: vec![3, 1, 2],
            lambda_values: vec![5.0, 0.5],
            metric: Metric::Mae,
            selection: Selection::MedianBest,
        };
        let res = grid_search(&t, &EstimatorConfig::new(EstimatorKind::MeanOverA), &spec, None).unwrap();
        assert_eq!((res.best_k, res.best_lambda), (1, 0.5));
        assert_eq!(res.table.len(), 6);
    }

    #[test]
    fn grid_without_successes_fails() {
        let t = fixtures::f2();
        let spec = GridSearchSpec { k_values: vec![40], lambda_values: vec![0.0], metric: Metric::Mae, selection: Selection::MeanBest };
        assert!(grid_search(&t, &EstimatorConfig::new(EstimatorKind::GsiRegAb), &spec, None).is_err());
        let bad = GridSearchSpec { k_values: vec![], ..spec };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn noiseless_grid_prefers_zero_lambda() {
        let spec = SyntheticSpec {
            model: ModelKind::MultiLatent,
            n_a: 10,
            n_b: 12,
            dim: 3,
            rank: 2,
            noise_std: 0.0,
            missing_fraction: 0.1,
            seed: 11,
        };
        let inst = generate(&spec).unwrap();
        let grid = GridSearchSpec {
            k_values: vec![4],
            lambda_values: vec![0.0, 1.0, 10.0],
            metric: Metric::Mae,
            selection: Selection::MeanBest,
        };
        let targets: Vec<(usize, usize)> = inst.observed_tensor.observed_cells().into_iter().step_by(5).collect();
        let res = grid_search(&inst.observed_tensor, &EstimatorConfig::new(EstimatorKind::GsiRegBa), &grid, Some(&targets)).unwrap();
        assert_eq!(res.best_lambda, 0.0);
    }

    #[test]
    fn row_split_targets() {
        let t = fixtures::f2();
        assert_eq!(targets_in_rows(&t, &[1]), vec![(1, 0), (1, 1)]);
    }

    #[test]
    fn parse_enums() {
        assert_eq!("two-sided".parse::<Alternative>().unwrap(), Alternative::TwoSided);
        assert_eq!("NRMSE".parse::<Metric>().unwrap(), Metric::Nrmse);
        assert_eq!("median_best".parse::<Selection>().unwrap(), Selection::MedianBest);
        assert!("most".parse::<Alternative>().is_err());
    }

    fn paired(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        n.prop_flat_map(|n| {
            // coarse values so that ties and zero differences occur
            (
                prop::collection::vec((-6i32..6).prop_map(|x| x as f64 * 0.5), n),
                prop::collection::vec((-6i32..6).prop_map(|x| x as f64 * 0.5), n),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn exact_matches_enumeration((a, b) in paired(1..=12)) {
            prop_assume!(a.iter().zip(&b).any(|(x, y)| x != y));
            for alt in [Alternative::Less, Alternative::Greater, Alternative::TwoSided] {
                let r = wilcoxon_signed_rank(&a, &b, alt).unwrap();
                let (w, p) = brute_force_p(&a, &b, alt);
                prop_assert_eq!(r.statistic, w);
                prop_assert!((r.p_value - p).abs() <= 1e-12, "{} vs {}", r.p_value, p);
            }
        }

        #[test]
        fn swapping_samples_swaps_tails((a, b) in paired(1..=40)) {
            prop_assume!(a.iter().zip(&b).any(|(x, y)| x != y));
            for method in [WilcoxonMethod::Exact, WilcoxonMethod::Normal] {
                let less = wilcoxon_signed_rank_with(&a, &b, Alternative::Less, method).unwrap();
                let greater = wilcoxon_signed_rank_with(&a, &b, Alternative::Greater, method).unwrap();
                let swapped_less = wilcoxon_signed_rank_with(&b, &a, Alternative::Less, method).unwrap();
                let swapped_greater = wilcoxon_signed_rank_with(&b, &a, Alternative::Greater, method).unwrap();
                prop_assert!((less.p_value - swapped_greater.p_value).abs() < 1e-12);
                prop_assert!((greater.p_value - swapped_less.p_value).abs() < 1e-12);
                let two = wilcoxon_signed_rank_with(&a, &b, Alternative::TwoSided, method).unwrap();
                prop_assert!((two.p_value - (2.0 * less.p_value.min(greater.p_value)).min(1.0)).abs() < 1e-15);
            }
        }

        #[test]
        fn exact_and_normal_agree_for_moderate_n(
            a in (10usize..=20).prop_flat_map(|n| prop::collection::vec(-1.0f64..1.0, n)),
            alt_ix in 0usize..3,
        ) {
            let b = vec![0.0; a.len()];
            prop_assume!(a.iter().all(|x| *x != 0.0));
            let alt = [Alternative::Less, Alternative::Greater, Alternative::TwoSided][alt_ix];
            let e = wilcoxon_signed_rank_with(&a, &b, alt, WilcoxonMethod::Exact).unwrap();
            let n = wilcoxon_signed_rank_with(&a, &b, alt, WilcoxonMethod::Normal).unwrap();
            prop_assert!((e.p_value - n.p_value).abs() <= 0.02, "{} vs {}", e.p_value, n.p_value);
        }

        #[test]
        fn harness_leaves_mask_untouched(seed in any::<u64>(), frac in 0.0f64..0.4) {
            let spec = SyntheticSpec {
                model: ModelKind::MultiLatent,
                n_a: 6,
                n_b: 7,
                dim: 2,
                rank: 1,
                noise_std: 0.1,
                missing_fraction: frac,
                seed,
            };
            let inst = generate(&spec).unwrap();
            let before = inst.observed_tensor.clone();
            let configs = [EstimatorConfig::new(EstimatorKind::GsiAb), EstimatorConfig::new(EstimatorKind::SiC)];
            let report = mask_and_impute(&inst.observed_tensor, &configs, None);
            prop_assert_eq!(before.mask(), inst.observed_tensor.mask());
            prop_assert_eq!(&before, &inst.observed_tensor);
            prop_assert_eq!(report.per_target.len(), 2 * before.observed_count());
            for r in &report.per_target {
                prop_assert!(!r.succeeded() || r.mae.unwrap().is_finite());
            }
        }

        #[test]
        fn reports_are_deterministic(seed in 0u64..1000) {
            let spec = SyntheticSpec {
                model: ModelKind::SingleLatent,
                n_a: 6,
                n_b: 6,
                dim: 2,
                rank: 1,
                noise_std: 0.2,
                missing_fraction: 0.2,
                seed,
            };
            let inst = generate(&spec).unwrap();
            let configs = [EstimatorConfig::new(EstimatorKind::GsiBa), EstimatorConfig::new(EstimatorKind::TwoWayMean)];
            let r1 = serde_json::to_string(&mask_and_impute(&inst.observed_tensor, &configs, None)).unwrap();
            let r2 = serde_json::to_string(&mask_and_impute(&inst.observed_tensor, &configs, None)).unwrap();
            prop_assert_eq!(r1, r2);
        }
    }
}
