use thiserror::Error;

use crate::estimation::FitResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state vector has zero norm")]
    ZeroVector,

    #[error("invalid density matrix: {0}")]
    InvalidState(String),

    #[error("matrix text parse error: {0}")]
    Parse(String),

    #[error("condition on the rotated qubit itself is not a conditional gate")]
    SelfCondition,

    #[error("hyperfine coupling A = 0 leaves the conditional gate undefined")]
    ZeroCoupling,

    #[error("integrator step underflow in segment `{segment}`: {steps} steps required")]
    StepUnderflow { segment: String, steps: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown marker `{0}`")]
    UnknownMarker(String),

    #[error("photon-count model missing from readout configuration")]
    NoPhotonModel,

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("fit needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("fit did not converge after {iterations} iterations (cost {cost:.3e})")]
    FitNotConverged {
        iterations: usize,
        cost: f64,
        best: Box<FitResult>,
    },

    #[error("envelope contrast is not positive (C0 = {0})")]
    NonPositiveContrast(f64),

    #[error("table parse error at line {line}: {message}")]
    Table { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
