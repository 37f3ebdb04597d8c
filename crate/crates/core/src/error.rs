use std::path::PathBuf;

/// Errors produced by the pruning library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("singular system in {op}: {detail}; pass eps > 0 to regularize")]
    Singular { op: &'static str, detail: String },

    #[error("invalid parameter `{name}`: {detail}")]
    Parameter { name: &'static str, detail: String },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("solver error in {stage}: {detail}")]
    Solver {
        stage: String,
        detail: String,
        trace: Vec<f64>,
    },

    #[error("missing capability: {0}")]
    Capability(String),

    #[error("problem size {size} exceeds the limit {limit} for {op}")]
    Size {
        op: &'static str,
        size: usize,
        limit: usize,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn param(name: &'static str, detail: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical solvers, as opposed to bad input.
    pub fn is_solver(&self) -> bool {
        matches!(self, Error::Solver { .. } | Error::Singular { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
