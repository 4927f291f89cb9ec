use std::path::PathBuf;

use thiserror::Error;

use crate::losses::LossBreakdown;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid `{field}`: {reason}")]
    InvalidSpec { field: &'static str, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{what} {value} out of range [0, {limit})")]
    OutOfRange { what: &'static str, value: usize, limit: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {breakdown:?}")]
    NonFiniteLoss { epoch: usize, batch: usize, breakdown: LossBreakdown },

    #[error("group (label={label}, attribute={attribute}) has no samples in split {split}")]
    EmptyGroup { label: usize, attribute: usize, split: String },

    #[error("guidance cache mismatch: {0}")]
    CacheMismatch(String),

    #[error("missing guidance: {0}")]
    MissingGuidance(String),

    #[error("{0}")]
    Invalid(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, #[source] source: std::io::Error },

    #[error("image error on {}: {source}", path.display())]
    Image { path: PathBuf, #[source] source: image::ImageError },

    #[error("csv error on {}: {source}", path.display())]
    Csv { path: PathBuf, #[source] source: csv::Error },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// Errors that stem from numeric blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::NonFiniteLoss { .. })
    }
}
