use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mode index {index} out of range 1..={max}")]
    ModeIndex { index: usize, max: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("fields live on different grids ({left} vs {right} interior points)")]
    GridMismatch { left: usize, right: usize },

    #[error("hypothesis violated: {0}")]
    HypothesisViolation(String),

    #[error("observable has no {0} metadata")]
    MissingDerivative(&'static str),

    #[error("blow-up at t={time:.6}: |u|_E = {norm:.3e} exceeds ceiling {ceiling:.3e}")]
    BlowUp { time: f64, norm: f64, ceiling: f64 },

    #[error("budget exhausted: {0}")]
    Budget(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
