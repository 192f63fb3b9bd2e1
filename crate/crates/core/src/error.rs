use thiserror::Error;

/// Errors raised by tensor slicing, estimation, generation, and evaluation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("donor set is empty")]
    EmptyDonorSet,

    #[error("no training column is observed for every donor and the target")]
    EmptyTrainingSet,

    #[error("k = {k} is infeasible: the best single donor leaves {available} training columns")]
    InfeasibleK { k: usize, available: usize },

    #[error("control row {control} cannot be used: {reason}")]
    MissingControl { control: usize, reason: String },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("regularized solver diverged (objective {objective:e} vs initial {initial:e})")]
    DivergenceDetected { objective: f64, initial: f64 },

    #[error("ground truth has zero standard deviation; NRMSE undefined")]
    DegenerateTruth,

    #[error("all paired differences are zero")]
    AllZeroDifferences,

    #[error("could not draw a mask covering every row and column after {attempts} attempts")]
    InfeasibleMask { attempts: usize },

    #[error("index ({a}, {b}) out of bounds for a {n_a} x {n_b} tensor")]
    IndexOutOfBounds { a: usize, b: usize, n_a: usize, n_b: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("duplicate pair ({a}, {b})")]
    DuplicatePair { a: String, b: String },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// True for failures of the numerical kernels rather than of the data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NumericalFailure(_) | Error::DivergenceDetected { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
