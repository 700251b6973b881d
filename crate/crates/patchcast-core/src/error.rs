use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("cannot parse cell at row {row}, column {col} ({name:?}): {msg}")]
    CsvCell {
        row: usize,
        col: usize,
        name: String,
        msg: String,
    },

    #[error("missing column {0:?}")]
    MissingColumn(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("weight file error: {0}")]
    WeightFile(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn shape(op: &'static str, left: impl std::fmt::Display, right: impl std::fmt::Display) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }
}
