use thiserror::Error;

/// Errors surfaced by the engine and the tooling built on it.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions do not satisfy an operation's contract.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration value violates a module invariant.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Checkpoint file malformed or inconsistent with the model being loaded.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset, manifest, or annotation input malformed.
    #[error("data error: {0}")]
    Data(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
