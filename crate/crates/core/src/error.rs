use thiserror::Error;

/// Errors raised anywhere in the recommendation stack.
#[derive(Debug, Error)]
pub enum Error {
    /// A drug id exceeded the size of the interaction graph or vocabulary.
    #[error("drug id {id} out of range for {n_drugs} drugs (graph/vocabulary mismatch)")]
    DrugOutOfRange { id: u32, n_drugs: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    /// Group-relative normalization needs at least two samples.
    #[error("group of size {0} is too small; at least 2 samples are required")]
    GroupTooSmall(usize),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
