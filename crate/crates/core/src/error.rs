use thiserror::Error;

/// Errors produced by the game model, solvers and planner.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("target index {index} out of range for {n_targets} targets")]
    Index { index: usize, n_targets: usize },

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid construction: {0}")]
    Construction(String),

    #[error("solver failure: {message} (residual {residual:e})")]
    Solver { message: String, residual: f64 },

    #[error("history is empty; the first step must use the equilibrium strategy")]
    EmptyHistory,

    #[error("trajectory was simulated without gradient blocks")]
    MissingGradients,

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            got,
        }
    }

    pub(crate) fn solver(message: impl Into<String>, residual: f64) -> Self {
        Error::Solver {
            message: message.into(),
            residual,
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            Error::AtStep { .. } => self,
            other => Error::AtStep {
                step,
                source: Box::new(other),
            },
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
