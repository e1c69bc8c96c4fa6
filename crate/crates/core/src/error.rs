use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },

    #[error("feeder is not radial: {0}")]
    NonRadial(String),

    #[error("bus {0} is not connected to the substation")]
    Disconnected(usize),

    #[error("invalid line parameters on line {line}: {reason}")]
    InvalidLine { line: usize, reason: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("reduced incidence matrix is singular")]
    SingularIncidence,

    #[error("power flow did not converge after {iterations} sweeps (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("no line connects bus {from} to bus {to}")]
    UnknownLine { from: usize, to: usize },

    #[error("line index {index} out of range (feeder has {count} lines)")]
    LineIndex { index: usize, count: usize },

    #[error("snapshot step {step} is not newer than window head {newest}")]
    StaleSnapshot { step: u64, newest: u64 },

    #[error("measurement window is empty")]
    EmptyWindow,

    #[error("control problem rejected: {}", .0.join("; "))]
    InvalidProblem(Vec<String>),

    #[error("control problem infeasible: {}", .0.join("; "))]
    Infeasible(Vec<String>),

    #[error("LP solver failed: {0}")]
    SolverFailure(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            message: message.to_string(),
        }
    }
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
