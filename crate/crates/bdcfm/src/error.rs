//! Error type shared by every module in the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error enum. Each variant carries enough context to locate the
/// failure; `code()` gives the stable machine-readable name used by the CLI's
/// JSON error output.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite ({context})")]
    NotPositiveDefinite { context: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("factor extraction failed to converge: {0}")]
    ConvergenceFailure(String),

    #[error("top-left loadings block is numerically singular ({0})")]
    SingularTopBlock(String),

    #[error("weighted least squares cross-product matrix is singular")]
    SingularGram,

    #[error("cluster {cluster} has only {size} member(s); at least 2 are required")]
    EmptyCluster { cluster: usize, size: usize },

    #[error("chain holds {0} stored draw(s); at least 2 are required")]
    InsufficientDraws(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("incomplete panel; missing (subject, time) pairs: {}", format_pairs(.0))]
    IncompletePanel(Vec<(String, i64)>),

    #[error("non-finite or unparseable value at {0}")]
    NonFiniteValue(String),

    #[error("duplicate cell for subject {subject} at time {time}")]
    DuplicateCell { subject: String, time: i64 },

    #[error("no chain output found in {}", .0.display())]
    MissingChains(PathBuf),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn format_pairs(pairs: &[(String, i64)]) -> String {
    const SHOWN: usize = 8;
    let mut s = pairs
        .iter()
        .take(SHOWN)
        .map(|(subj, t)| format!("({subj}, {t})"))
        .collect::<Vec<_>>()
        .join(", ");
    if pairs.len() > SHOWN {
        s.push_str(&format!(", ... {} more", pairs.len() - SHOWN));
    }
    s
}

impl Error {
    /// Stable error code for machine-readable output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::NotPositiveDefinite { .. } => "NotPositiveDefinite",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::ConvergenceFailure(_) => "ConvergenceFailure",
            Error::SingularTopBlock(_) => "SingularTopBlock",
            Error::SingularGram => "SingularGram",
            Error::EmptyCluster { .. } => "EmptyCluster",
            Error::InsufficientDraws(_) => "InsufficientDraws",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::IncompletePanel(_) => "IncompletePanel",
            Error::NonFiniteValue(_) => "NonFiniteValue",
            Error::DuplicateCell { .. } => "DuplicateCell",
            Error::MissingChains(_) => "MissingChains",
            Error::Config(_) => "Config",
            Error::Io { .. } => "Io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
