//! Causal imputation over incomplete interaction tensors with generalized
//! synthetic interventions (GSI), its shared-weight predecessors SI-A and
//! SI-C, and mean-based baselines.

pub mod cli_io;
pub mod error;
pub mod estimators;
pub mod evaluation;
pub mod regression;
pub mod synthgen;
pub mod tensor;

pub use error::{Error, Result};
