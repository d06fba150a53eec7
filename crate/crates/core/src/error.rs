use thiserror::Error;

/// Errors surfaced by the library.
///
/// Contract violations (`Dim`, `Domain`, `Contract`) indicate caller bugs;
/// the I/O and format variants are recoverable conditions that commands
/// report to the user.
#[derive(Debug, Error)]
pub enum Error {
    /// Array shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// A numeric argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An API contract was violated (e.g. backward called twice).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A layout document or configuration failed validation.
    #[error("schema error: {0}")]
    Schema(String),

    /// Checkpoint file is malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Malformed input file (annotations, configs, streams).
    #[error("parse error: {0}")]
    Parse(String),

    /// Training diverged or produced a non-finite loss.
    #[error("training error: {0}")]
    Train(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
