use std::path::PathBuf;

/// Unified error type for the whole crate. Numeric kernels, file formats and
/// the training driver all report through this so CLI surfaces can print one
/// diagnostic and exit nonzero.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("vector norm {norm:.3e} is below the zero tolerance {tol:.1e}")]
    ZeroNorm { norm: f64, tol: f64 },

    #[error("contrastive loss needs at least one negative")]
    EmptyNegatives,

    #[error("label {label} outside [0, {classes})")]
    InvalidLabel { label: usize, classes: usize },

    #[error("not a probability distribution: {0}")]
    NotADistribution(String),

    #[error("divergence decomposition is degenerate: total mass is zero")]
    ZeroDivergence,

    #[error("gallery has no entries")]
    EmptyGallery,

    #[error("k = {k} must lie in [1, {max}]")]
    InvalidK { k: usize, max: usize },

    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated, {0}", .detail)]
    TruncatedFile { path: PathBuf, detail: String },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
