use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("{0} used before being fitted")]
    NotFitted(&'static str),

    #[error("{0} has not been trained")]
    Untrained(&'static str),

    #[error("training diverged at epoch {epoch}, step {step} (loss = {loss})")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("simulation blew up at step {step}: {reason}")]
    Simulation { step: usize, reason: String },

    #[error("row {row}: expected {expected} values, found {found}")]
    Dimension {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("unknown object id `{0}`")]
    UnknownObject(String),

    #[error("rank-deficient design for axis {axis} (condition number {condition_number:.3e})")]
    RankDeficient { axis: char, condition_number: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
