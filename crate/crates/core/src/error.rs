use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A numeric or count parameter is outside its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// Input data has the wrong shape or contains non-finite values.
    #[error("input error: {0}")]
    Input(String),
    /// Referenced data (a row, a feature vector, a file column) is missing.
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    /// API misuse, e.g. asking for a backward pass without a cached forward.
    #[error("usage error: {0}")]
    Usage(String),
    /// Training produced a non-finite loss.
    #[error("divergence: non-finite value in loss term `{term}`")]
    Divergence { term: String },
    /// Spot identifiers do not line up across input files.
    #[error("alignment error: spot ids not present in every file: {}", .missing.join(", "))]
    Alignment { missing: Vec<String> },
    #[error("parse error in {file} at row {row}, column {col}: {msg}")]
    Parse {
        file: String,
        row: usize,
        col: usize,
        msg: String,
    },
    #[error("file error: {path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn file(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::File {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
