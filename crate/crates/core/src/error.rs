use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A numeric input outside the function's domain (NaN, infinity).
    #[error("domain error: {0}")]
    Domain(String),

    /// Shapes, ranges or identifiers that violate a type invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A serialized artifact that cannot be decoded.
    #[error("format error: {0}")]
    Format(String),

    /// Both branch embeddings were zero, so no unit template exists.
    #[error("degenerate embedding: both branch embeddings are zero")]
    DegenerateEmbedding,

    #[error("unsupported FAR level {level}: needs at least {needed} imposter scores, have {available}")]
    UnsupportedFarLevel {
        level: f64,
        needed: usize,
        available: usize,
    },

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

/// Coarse error classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Runtime,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Domain(_)
            | Error::Validation(_)
            | Error::Format(_)
            | Error::DegenerateEmbedding
            | Error::UnsupportedFarLevel { .. }
            | Error::Image(_) => ErrorKind::Validation,
            Error::Diverged { .. } | Error::Io(_) => ErrorKind::Runtime,
        }
    }
}

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

pub(crate) fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub(crate) fn ensure_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be finite, got {v}")))
    }
}
