use tokenfusion::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("gradient check failed: max relative error {max_rel_err:.3e} >= {tol:e}")]
    GradCheckFailed { max_rel_err: f64, tol: f64 },

    #[error("cannot write {path}: {source}")]
    Output { path: String, source: std::io::Error },

    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 1 config, 2 dataset, 3 numerical failure, 4 weights do not fit the model.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Output { .. } => 1,
            CliError::GradCheckFailed { .. } => 3,
            CliError::Core(e) => match e {
                Error::Dataset(_) => 2,
                Error::NonFinite(_) => 3,
                Error::WeightFormat(_) | Error::WeightMismatch(_) => 4,
                _ => 1,
            },
        }
    }
}
