use std::process::ExitCode;

use firesense::analysis::AnalysisError;
use firesense::config::ConfigError;
use firesense::data::DataError;
use firesense::eval::EvalError;
use firesense::train::TrainError;
use firesense::TensorError;
use thiserror::Error;

/// Failure classes with stable exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        })
    }
}

pub type CliResult<T> = Result<T, CliError>;

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        let msg = e.to_string();
        match e {
            TensorError::NonFinite { .. } => CliError::Numerical(msg),
            // Geometry problems come from the input files.
            TensorError::ShapeMismatch { .. } | TensorError::Dimension { .. } => CliError::Data(msg),
            TensorError::Config { .. } | TensorError::Usage(_) => CliError::Usage(msg),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numerical() {
            return CliError::Numerical(e.to_string());
        }
        match e {
            TrainError::Tensor(t) => t.into(),
            TrainError::Data(d) => d.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Tensor(t) => t.into(),
            AnalysisError::Eval(v) => v.into(),
            AnalysisError::Data(d) => d.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
