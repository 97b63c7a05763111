use thiserror::Error;

/// Errors produced by the dynamics, surrogate, optimizer and analysis layers.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    /// A rotlet was evaluated closer than `r_min` to its rotor with no blob regularization.
    #[error("singular rotlet evaluation: distance {distance:e} below r_min {r_min:e}{}", step_suffix(*step))]
    SingularEvaluation {
        distance: f64,
        r_min: f64,
        step: Option<usize>,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("weight matrix `{0}` is not diagonal")]
    NonDiagonalWeight(&'static str),

    #[error("regularized Q_uu is not positive definite at step {step}")]
    NotPositiveDefinite { step: usize },

    #[error("Cauchy-Green tensor has negative eigenvalue {value:e} at node {node}")]
    NegativeEigenvalue { node: usize, value: f64 },

    #[error("time window [{start}, {end}] lies outside the stored horizon [0, {horizon}]")]
    WindowOutOfRange { start: f64, end: f64, horizon: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn step_suffix(step: Option<usize>) -> String {
    match step {
        Some(s) => format!(" at step {s}"),
        None => String::new(),
    }
}

impl Error {
    /// Attaches a step index to a singular evaluation error, leaving other errors untouched.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::SingularEvaluation {
                distance,
                r_min,
                step: None,
            } => Error::SingularEvaluation {
                distance,
                r_min,
                step: Some(step),
            },
            other => other,
        }
    }

    pub fn is_singular(&self) -> bool {
        matches!(self, Error::SingularEvaluation { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
