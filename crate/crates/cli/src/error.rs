use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),

    #[error("acceptance: {0}")]
    Acceptance(String),

    #[error(transparent)]
    Core(#[from] icra_core::Error),
}

impl CliError {
    /// 0 success, 2 config, 3 IO or input data, 4 divergence, 5 acceptance.
    pub fn exit_code(&self) -> i32 {
        use icra_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Acceptance(_) => 5,
            CliError::Core(e) => match e {
                E::Config(_) | E::DimensionMismatch { .. } | E::ModeMismatch { .. } => 2,
                E::Io(_) | E::Csv(_) | E::Parse { .. } | E::Data(_) => 3,
                E::Diverged { .. } => 4,
                E::Report(_) => 5,
                E::Simulation(_) | E::Internal(_) => 1,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
