use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("mode mismatch: expected {expected} prompt, found {found}")]
    ModeMismatch { expected: String, found: String },

    #[error("training diverged at iteration {iteration}: loss {loss:.6e} (initial {initial:.6e}); reduce the step size")]
    Diverged {
        iteration: usize,
        loss: f64,
        initial: f64,
    },

    #[error("report error: {0}")]
    Report(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
