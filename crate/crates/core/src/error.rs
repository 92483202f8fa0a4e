use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("block budget violated: {found} transformer blocks, expected 12 (set relax_block_budget for reduced toy depths)")]
    BlockBudget { found: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("weight file error: {0}")]
    WeightFormat(String),

    #[error("weights do not match model: {0}")]
    WeightMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}
