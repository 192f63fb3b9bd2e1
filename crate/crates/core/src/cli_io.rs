//! Long-form CSV datasets, run configuration, report files and the `gsi`
//! command line.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// stdout writes that tolerate a closed pipe (e.g. `gsi impute ... | head`)
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

use crate::estimators::{estimate, EstimatorConfig, EstimatorKind};
use crate::evaluation::{
    grid_search, mask_and_impute, Alternative, EvaluationReport, GridSearchResult, GridSearchSpec, Metric, Selection,
};
use crate::synthgen::{generate, ModelKind, SyntheticInstance, SyntheticSpec};
use crate::tensor::{Direction, IncompleteTensor};

/// JSON schema every benchmark report validates against.
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");
/// Environment variable holding the default worker thread count.
pub const THREADS_ENV: &str = "GSI_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Interaction table keyed by string labels; labels are indexed in order of
/// first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct LongFormDataset {
    pub a_labels: Vec<String>,
    pub b_labels: Vec<String>,
    pub rows: Vec<(String, String, Vec<f64>)>,
}

impl LongFormDataset {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.2.len())
    }

    pub fn to_tensor(&self) -> Result<IncompleteTensor> {
        let a_index = index_of(&self.a_labels);
        let b_index = index_of(&self.b_labels);
        let mut tensor = IncompleteTensor::new(self.a_labels.len(), self.b_labels.len(), self.dim())?;
        for (a, b, v) in &self.rows {
            let (i, j) = match (a_index.get(a.as_str()), b_index.get(b.as_str())) {
                (Some(&i), Some(&j)) => (i, j),
                _ => return Err(Error::Parse(format!("row ({a}, {b}) uses an unknown label"))),
            };
            if tensor.is_observed(i, j) {
                return Err(Error::DuplicatePair { a: a.clone(), b: b.clone() });
            }
            tensor.set(i, j, v)?;
        }
        Ok(tensor)
    }

    /// Observed cells of `tensor` in row-major order under the given labels.
    pub fn from_tensor(tensor: &IncompleteTensor, a_labels: Vec<String>, b_labels: Vec<String>) -> Result<Self> {
        if a_labels.len() != tensor.n_a() || b_labels.len() != tensor.n_b() {
            return Err(Error::InvalidInput("label counts do not match the tensor shape".into()));
        }
        let rows = tensor
            .observed_cells()
            .into_iter()
            .map(|(i, j)| (a_labels[i].clone(), b_labels[j].clone(), tensor.entry(i, j).unwrap().to_vec()))
            .collect();
        Ok(Self { a_labels, b_labels, rows })
    }

    pub fn a_index(&self, label: &str) -> Result<usize> {
        position(&self.a_labels, label, "a")
    }

    pub fn b_index(&self, label: &str) -> Result<usize> {
        position(&self.b_labels, label, "b")
    }
}

fn index_of(labels: &[String]) -> HashMap<&str, usize> {
    labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect()
}

fn position(labels: &[String], label: &str, axis: &str) -> Result<usize> {
    labels
        .iter()
        .position(|l| l == label)
        .ok_or_else(|| Error::InvalidInput(format!("unknown {axis} label '{label}'")))
}

/// Default labels `a0, a1, ...` and `b0, b1, ...`.
pub fn default_labels(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io(e.to_string()),
        _ => Error::Parse(e.to_string()),
    }
}

/// Parses a long-form table with header `a_id,b_id,y0,...,y{D-1}`.
pub fn read_csv<R: Read>(reader: R) -> Result<(LongFormDataset, IncompleteTensor)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let dim = header.len().saturating_sub(2);
    let expected_y = (0..dim).all(|d| header.get(d + 2).map(str::trim) == Some(format!("y{d}").as_str()));
    if header.len() < 3 || header.get(0).map(str::trim) != Some("a_id") || header.get(1).map(str::trim) != Some("b_id") || !expected_y {
        return Err(Error::Parse(format!(
            "header must be a_id,b_id,y0,...,y{{D-1}}; found '{}'",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut a_labels = Vec::new();
    let mut b_labels = Vec::new();
    let mut a_seen = HashMap::new();
    let mut b_seen = HashMap::new();
    let mut seen_pairs = std::collections::HashSet::new();
    let mut rows = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let row_no = line + 2;
        let a = record[0].trim().to_string();
        let b = record[1].trim().to_string();
        if a.is_empty() || b.is_empty() {
            return Err(Error::Parse(format!("line {row_no}: empty label")));
        }
        let values = (2..record.len())
            .map(|c| {
                let field = record[c].trim();
                match field.parse::<f64>() {
                    Ok(x) if x.is_finite() => Ok(x),
                    _ => Err(Error::Parse(format!("line {row_no}: '{field}' is not a finite number"))),
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        if !seen_pairs.insert((a.clone(), b.clone())) {
            return Err(Error::DuplicatePair { a, b });
        }
        if !a_seen.contains_key(&a) {
            a_seen.insert(a.clone(), a_labels.len());
            a_labels.push(a.clone());
        }
        if !b_seen.contains_key(&b) {
            b_seen.insert(b.clone(), b_labels.len());
            b_labels.push(b.clone());
        }
        rows.push((a, b, values));
    }
    if rows.is_empty() {
        return Err(Error::Parse("dataset has no rows".into()));
    }
    let dataset = LongFormDataset { a_labels, b_labels, rows };
    let tensor = dataset.to_tensor()?;
    Ok((dataset, tensor))
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<(LongFormDataset, IncompleteTensor)> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_csv(std::io::BufReader::new(file))
}

/// Writes rows in dataset order; floats use the shortest round-trip form.
pub fn write_csv<W: Write>(writer: W, dataset: &LongFormDataset) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["a_id".to_string(), "b_id".to_string()];
    header.extend((0..dataset.dim()).map(|d| format!("y{d}")));
    wtr.write_record(&header).map_err(csv_err)?;
    for (a, b, v) in &dataset.rows {
        let mut rec = vec![a.clone(), b.clone()];
        rec.extend(v.iter().map(|x| format!("{x}")));
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_csv(path: impl AsRef<Path>, dataset: &LongFormDataset) -> Result<()> {
    let file = fs::File::create(path.as_ref())?;
    write_csv(std::io::BufWriter::new(file), dataset)
}

/// Which cells a benchmark masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSpec {
    AllObserved,
    Single { a: String, b: String },
    List(Vec<(String, String)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub estimators: Vec<EstimatorConfig>,
    pub targets: TargetSpec,
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Keep at most this many targets, sampled with `seed`.
    #[serde(default)]
    pub max_targets: Option<usize>,
    /// A labels used for tuning.
    #[serde(default)]
    pub validation_a: Option<Vec<String>>,
    /// A labels used for the benchmark sweep.
    #[serde(default)]
    pub test_a: Option<Vec<String>>,
    #[serde(default)]
    pub comparisons: Vec<ComparisonSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSpec {
    pub estimator_a: String,
    pub estimator_b: String,
    pub metric: Metric,
    pub alternative: Alternative,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dataset.as_os_str().is_empty() || self.output.as_os_str().is_empty() {
            return Err(Error::InvalidInput("dataset and output paths must be non-empty".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidInput("at least one estimator is required".into()));
        }
        let mut names = std::collections::HashSet::new();
        for config in &self.estimators {
            config.validate()?;
            if !names.insert(config.name()) {
                return Err(Error::InvalidInput(format!("estimator name '{}' used twice", config.name())));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("run config: {e}")))
    }

    /// Resolves target cells against the dataset; the test split restricts
    /// them to listed A labels.
    pub fn resolve_targets(&self, dataset: &LongFormDataset, tensor: &IncompleteTensor) -> Result<Vec<(usize, usize)>> {
        let mut cells = match &self.targets {
            TargetSpec::AllObserved => tensor.observed_cells(),
            TargetSpec::Single { a, b } => vec![(dataset.a_index(a)?, dataset.b_index(b)?)],
            TargetSpec::List(list) => list
                .iter()
                .map(|(a, b)| Ok((dataset.a_index(a)?, dataset.b_index(b)?)))
                .collect::<Result<_>>()?,
        };
        if let Some(test) = &self.test_a {
            let rows = rows_for(dataset, test)?;
            cells.retain(|(a, _)| rows.contains(a));
        }
        Ok(subsample(cells, self.max_targets, self.seed))
    }
}

fn rows_for(dataset: &LongFormDataset, labels: &[String]) -> Result<Vec<usize>> {
    labels.iter().map(|l| dataset.a_index(l)).collect()
}

/// Seeded subset of at most `max` cells, returned in their original order.
pub fn subsample(cells: Vec<(usize, usize)>, max: Option<usize>, seed: u64) -> Vec<(usize, usize)> {
    match max {
        Some(m) if m < cells.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picks: Vec<usize> = (0..cells.len()).collect();
            picks.shuffle(&mut rng);
            picks.truncate(m);
            picks.sort_unstable();
            picks.into_iter().map(|i| cells[i]).collect()
        }
        _ => cells,
    }
}

/// Runs the benchmark sweep described by `config` and its comparisons.
pub fn run_benchmark(config: &RunConfig, timestamp: Option<u64>) -> Result<EvaluationReport> {
    config.validate()?;
    let (dataset, tensor) = load_csv(&config.dataset)?;
    let targets = config.resolve_targets(&dataset, &tensor)?;
    let mut report = mask_and_impute(&tensor, &config.estimators, Some(&targets));
    report.metadata.generated_at_unix = timestamp;
    report.metadata.seed = Some(config.seed);
    report.metadata.dataset = Some(config.dataset.display().to_string());
    for c in &config.comparisons {
        let record = report.compare(&c.estimator_a, &c.estimator_b, c.metric, c.alternative)?;
        report.comparisons.push(record);
    }
    Ok(report)
}

/// One column per estimator (NRMSE per target, empty where unavailable).
pub fn write_nrmse_columns<W: Write>(writer: W, report: &EvaluationReport) -> Result<()> {
    let names = report.estimator_names();
    let mut by_target: Vec<(usize, usize)> = Vec::new();
    let mut values: HashMap<((usize, usize), &str), f64> = HashMap::new();
    for r in &report.per_target {
        let key = (r.a_index, r.b_index);
        if by_target.last() != Some(&key) && !by_target.contains(&key) {
            by_target.push(key);
        }
        if let Some(v) = r.nrmse.filter(|_| r.succeeded()) {
            values.insert((key, r.estimator.as_str()), v);
        }
    }
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["a_index".to_string(), "b_index".to_string()];
    header.extend(names.iter().cloned());
    wtr.write_record(&header).map_err(csv_err)?;
    for key in by_target {
        let mut rec = vec![key.0.to_string(), key.1.to_string()];
        for name in &names {
            rec.push(values.get(&(key, name.as_str())).map(|v| format!("{v}")).unwrap_or_default());
        }
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Parses `name[:k=K][:lambda=L][:label=NAME][:std][:control=LABEL]`.
fn parse_estimator(spec: &str, defaults: &EstimatorFlags, dataset: Option<&LongFormDataset>) -> std::result::Result<EstimatorConfig, CliError> {
    let mut parts = spec.split(':');
    let kind: EstimatorKind = parts.next().unwrap_or_default().parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let mut config = EstimatorConfig::new(kind).with_k(defaults.k).with_lambda(defaults.lambda).standardized(defaults.standardize);
    let mut control = defaults.control.clone();
    for part in parts {
        let (key, value) = part.split_once('=').unwrap_or((part, ""));
        let bad = || CliError::Usage(format!("bad estimator option '{part}' in '{spec}'"));
        match key {
            "k" => config = config.with_k(value.parse().map_err(|_| bad())?),
            "lambda" => config = config.with_lambda(value.parse().map_err(|_| bad())?),
            "label" if !value.is_empty() => config = config.labeled(value),
            "std" => config = config.standardized(true),
            "control" if !value.is_empty() => control = Some(value.to_string()),
            _ => return Err(bad()),
        }
    }
    if kind == EstimatorKind::FixedActionEffect {
        let label = control.ok_or_else(|| CliError::Usage("fixed_action_effect needs --control".into()))?;
        let index = match dataset {
            Some(d) => d.a_index(&label).map_err(CliError::Data)?,
            None => label.parse().map_err(|_| CliError::Usage(format!("bad control '{label}'")))?,
        };
        config.control_index = Some(index);
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "gsi", version, about = "Tensor imputation with generalized synthetic interventions")]
struct Cli {
    /// Worker threads (default: $GSI_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic latent-factor instance and write it as CSV plus a truth sidecar.
    Generate(GenerateArgs),
    /// Impute one missing cell.
    Impute(ImputeArgs),
    /// Mask-and-impute sweep over observed cells, written as a JSON report.
    Benchmark(BenchmarkArgs),
    /// Grid search over k and lambda.
    Tune(TuneArgs),
    /// Signed-rank comparison of two estimators stored in a report.
    Compare(CompareArgs),
    /// Print the report JSON schema.
    Schema,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, default_value = "multi", value_parser = ["multi", "single"])]
    model: String,
    #[arg(long)]
    na: usize,
    #[arg(long)]
    nb: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    rank: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    missing: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct EstimatorFlags {
    /// Minimum number of training columns for the regression estimators.
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Fit on the standardized tensor.
    #[arg(long)]
    standardize: bool,
    /// Control A label for fixed_action_effect.
    #[arg(long)]
    control: Option<String>,
}

#[derive(Args, Debug)]
struct ImputeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    a: String,
    #[arg(long)]
    b: String,
    #[arg(long, default_value = "gsi_ab")]
    estimator: String,
    #[command(flatten)]
    flags: EstimatorFlags,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    /// Run configuration (JSON); replaces the dataset/estimator flags.
    #[arg(long, conflicts_with_all = ["data", "estimators"])]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    data: Option<PathBuf>,
    /// Comma-separated estimators, each `name[:k=K][:lambda=L][:label=NAME][:std][:control=LABEL]`.
    #[arg(long, value_delimiter = ',', required_unless_present = "config")]
    estimators: Vec<String>,
    #[command(flatten)]
    flags: EstimatorFlags,
    /// Only mask cells in these A labels.
    #[arg(long, value_delimiter = ',')]
    test_a: Option<Vec<String>>,
    #[arg(long)]
    max_targets: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comparisons `est_a,est_b[,alternative[,metric]]`, separated by ';'.
    #[arg(long, value_delimiter = ';')]
    compare: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Omit the generation time so reports are byte-identical across runs.
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Args, Debug)]
struct TuneArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "gsi_reg_ab")]
    estimator: String,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    k_values: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    lambda_values: Vec<f64>,
    #[arg(long, default_value = "nrmse")]
    metric: String,
    #[arg(long, default_value = "median_best")]
    selection: String,
    #[arg(long)]
    standardize: bool,
    #[arg(long)]
    control: Option<String>,
    /// Only mask cells in these A labels.
    #[arg(long, value_delimiter = ',')]
    validation_a: Option<Vec<String>>,
    #[arg(long)]
    max_targets: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the score table as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    report: PathBuf,
    /// Two estimator names, `est_a,est_b`.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pair: Vec<String>,
    #[arg(long, default_value = "two_sided")]
    alternative: String,
    #[arg(long, default_value = "nrmse")]
    metric: String,
}

/// Entry point of the `gsi` binary; returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let threads = cli
        .threads
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()))
        .filter(|&n| n > 0);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let outcome = match builder.build() {
        Ok(pool) => pool.install(|| dispatch(cli.command)),
        Err(e) => Err(CliError::Data(Error::InvalidInput(e.to_string()))),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_DATA
            }
        }
    }
}

fn dispatch(command: Command) -> std::result::Result<(), CliError> {
    match command {
        Command::Generate(args) => cmd_generate(args),
        Command::Impute(args) => cmd_impute(args),
        Command::Benchmark(args) => cmd_benchmark(args),
        Command::Tune(args) => cmd_tune(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Schema => {
            say!("{}", REPORT_SCHEMA.trim_end());
            Ok(())
        }
    }
}

fn usage<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, CliError> {
    s.parse().map_err(|e: Error| CliError::Usage(e.to_string()))
}

/// Sidecar path next to a generated CSV: `data.csv` -> `data.truth.json`.
pub fn truth_sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("truth.json")
}

#[derive(Serialize)]
struct TruthSidecar<'a> {
    spec: &'a SyntheticSpec,
    a_labels: &'a [String],
    b_labels: &'a [String],
    /// `[a][b][d]` noiseless values for every cell.
    truth: Vec<Vec<Vec<f64>>>,
    /// `[a][d][rho]`.
    u_factors: Vec<Vec<Vec<f64>>>,
    /// `[b][d][rho]` for the multi model, `[b][rho]` for the single model.
    v_factors: serde_json::Value,
}

fn sidecar(inst: &SyntheticInstance, a_labels: &[String], b_labels: &[String]) -> Result<String> {
    let s = &inst.spec;
    let truth = (0..s.n_a)
        .map(|i| (0..s.n_b).map(|j| inst.ground_truth(i, j)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let u_factors = (0..s.n_a)
        .map(|i| (0..s.dim).map(|d| (0..s.rank).map(|r| inst.u(i, d, r)).collect()).collect())
        .collect();
    let v_factors = match s.model {
        ModelKind::MultiLatent => serde_json::to_value(
            (0..s.n_b)
                .map(|j| (0..s.dim).map(|d| (0..s.rank).map(|r| inst.v(j, d, r)).collect::<Vec<f64>>()).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        ),
        ModelKind::SingleLatent => serde_json::to_value(
            (0..s.n_b).map(|j| (0..s.rank).map(|r| inst.v(j, 0, r)).collect::<Vec<f64>>()).collect::<Vec<_>>(),
        ),
    }
    .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let body = TruthSidecar { spec: s, a_labels, b_labels, truth, u_factors, v_factors };
    serde_json::to_string_pretty(&body).map_err(|e| Error::InvalidInput(e.to_string()))
}

fn cmd_generate(args: GenerateArgs) -> std::result::Result<(), CliError> {
    let model = if args.model == "single" { ModelKind::SingleLatent } else { ModelKind::MultiLatent };
    let spec = SyntheticSpec {
        model,
        n_a: args.na,
        n_b: args.nb,
        dim: args.dim,
        rank: args.rank,
        noise_std: args.noise,
        missing_fraction: args.missing,
        seed: args.seed,
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let inst = generate(&spec)?;
    let a_labels = default_labels("a", spec.n_a);
    let b_labels = default_labels("b", spec.n_b);
    let dataset = LongFormDataset::from_tensor(&inst.observed_tensor, a_labels.clone(), b_labels.clone())?;
    save_csv(&args.out, &dataset)?;
    let side = truth_sidecar_path(&args.out);
    fs::write(&side, sidecar(&inst, &a_labels, &b_labels)? + "\n").map_err(Error::from)?;
    say!("wrote {} ({} observed cells) and {}", args.out.display(), dataset.rows.len(), side.display());
    Ok(())
}

fn donor_axis_is_a(kind: EstimatorKind) -> bool {
    match kind {
        EstimatorKind::MeanOverB => false,
        k => k.direction() != Some(Direction::RegressOverB),
    }
}

#[derive(Serialize)]
struct ImputeOutput {
    a: String,
    b: String,
    estimator: String,
    estimate: Vec<f64>,
    donors: Vec<String>,
    training_columns: Vec<String>,
    standardized: bool,
}

fn cmd_impute(args: ImputeArgs) -> std::result::Result<(), CliError> {
    let (dataset, tensor) = load_csv(&args.data)?;
    let config = parse_estimator(&args.estimator, &args.flags, Some(&dataset))?;
    let a = dataset.a_index(&args.a)?;
    let b = dataset.b_index(&args.b)?;
    let pred = estimate(&tensor, (a, b), &config)?;
    let (donor_labels, train_labels) = if donor_axis_is_a(config.kind) {
        (&dataset.a_labels, &dataset.b_labels)
    } else {
        (&dataset.b_labels, &dataset.a_labels)
    };
    let out = ImputeOutput {
        a: args.a,
        b: args.b,
        estimator: config.name(),
        estimate: pred.estimate.clone(),
        donors: pred.donors_used.iter().map(|&i| donor_labels[i].clone()).collect(),
        training_columns: pred.training_columns_used.iter().map(|&i| train_labels[i].clone()).collect(),
        standardized: pred.standardization.is_some(),
    };
    say!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
    Ok(())
}

fn parse_comparison(spec: &str) -> std::result::Result<ComparisonSpec, CliError> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    if parts.len() < 2 || parts.len() > 4 {
        return Err(CliError::Usage(format!("bad comparison '{spec}'")));
    }
    Ok(ComparisonSpec {
        estimator_a: parts[0].to_string(),
        estimator_b: parts[1].to_string(),
        alternative: parts.get(2).map_or(Ok(Alternative::TwoSided), |s| usage(s))?,
        metric: parts.get(3).map_or(Ok(Metric::Nrmse), |s| usage(s))?,
    })
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn cmd_benchmark(args: BenchmarkArgs) -> std::result::Result<(), CliError> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let data = args.data.clone().expect("required by clap");
            let (dataset, _) = load_csv(&data)?;
            let estimators = args
                .estimators
                .iter()
                .map(|s| parse_estimator(s, &args.flags, Some(&dataset)))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            RunConfig {
                dataset: data,
                estimators,
                targets: TargetSpec::AllObserved,
                output: args.out.clone().unwrap_or_else(|| PathBuf::from("report.json")),
                seed: args.seed,
                max_targets: args.max_targets,
                validation_a: None,
                test_a: args.test_a.clone(),
                comparisons: Vec::new(),
            }
        }
    };
    if let Some(out) = &args.out {
        config.output = out.clone();
    }
    for c in args.compare.iter().filter(|c| !c.trim().is_empty()) {
        config.comparisons.push(parse_comparison(c)?);
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let timestamp = (!args.no_timestamp).then(unix_now);
    let report = run_benchmark(&config, timestamp)?;
    let json = serde_json::to_string_pretty(&report).expect("serializable") + "\n";
    fs::write(&config.output, json).map_err(Error::from)?;
    let columns = config.output.with_extension("nrmse.csv");
    write_nrmse_columns(fs::File::create(&columns).map_err(Error::from)?, &report)?;
    for agg in &report.aggregates {
        let fmt = |s: Option<crate::evaluation::Summary>| s.map_or("n/a".to_string(), |s| format!("{:.6}", s.median));
        say!(
            "{:<24} ok {:>6}  failed {:>6}  median mae {}  median nrmse {}",
            agg.estimator,
            agg.successes,
            agg.failures,
            fmt(agg.mae),
            fmt(agg.nrmse)
        );
    }
    for c in &report.comparisons {
        say!(
            "{} vs {} ({}, {}): W = {} p = {:e} (n = {})",
            c.estimator_a, c.estimator_b, c.metric, c.alternative, c.statistic, c.p_value, c.n_pairs
        );
    }
    say!("wrote {} and {}", config.output.display(), columns.display());
    Ok(())
}

fn cmd_tune(args: TuneArgs) -> std::result::Result<(), CliError> {
    let metric: Metric = usage(&args.metric)?;
    let selection: Selection = usage(&args.selection)?;
    let (dataset, tensor) = load_csv(&args.data)?;
    let flags = EstimatorFlags { k: 1, lambda: 0.0, standardize: args.standardize, control: args.control.clone() };
    let base = parse_estimator(&args.estimator, &flags, Some(&dataset))?;
    let spec = GridSearchSpec { k_values: args.k_values.clone(), lambda_values: args.lambda_values.clone(), metric, selection };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut cells = tensor.observed_cells();
    if let Some(labels) = &args.validation_a {
        let rows = rows_for(&dataset, labels)?;
        cells.retain(|(a, _)| rows.contains(a));
    }
    let cells = subsample(cells, args.max_targets, args.seed);
    let result: GridSearchResult = grid_search(&tensor, &base, &spec, Some(&cells))?;
    for cell in &result.table {
        let score = cell.score.map_or("n/a".to_string(), |s| format!("{s:.6}"));
        say!("k = {:<4} lambda = {:<10} {} = {}  ({} ok, {} failed)", cell.k, cell.lambda, metric, score, cell.successes, cell.failures);
    }
    say!("best k = {} lambda = {} ({} {} = {})", result.best_k, result.best_lambda, selection, metric, result.best_score);
    if let Some(out) = &args.out {
        fs::write(out, serde_json::to_string_pretty(&result).expect("serializable") + "\n").map_err(Error::from)?;
    }
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> std::result::Result<(), CliError> {
    if args.pair.len() != 2 {
        return Err(CliError::Usage("--pair takes exactly two estimator names".into()));
    }
    let alternative: Alternative = usage(&args.alternative)?;
    let metric: Metric = usage(&args.metric)?;
    let text = fs::read_to_string(&args.report).map_err(Error::from)?;
    let report: EvaluationReport = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("report: {e}")))?;
    let c = report.compare(&args.pair[0], &args.pair[1], metric, alternative)?;
    say!("W = {}", c.statistic);
    say!("p = {:e}", c.p_value);
    say!("n_pairs = {} n_nonzero = {} exact = {}", c.n_pairs, c.n_nonzero, c.exact);
    Ok(())
}
