use std::path::PathBuf;

use chrono::NaiveDate;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{0} must not be empty")]
    EmptyInput(&'static str),

    #[error("record {row_id} is dated {date}, before the training day {train_day}")]
    RecordBeforeTrainDay {
        row_id: u64,
        date: NaiveDate,
        train_day: NaiveDate,
    },

    #[error("training day {0} does not occur in the data")]
    TrainDayMissing(NaiveDate),

    #[error(
        "training input spans {days} calendar days ({first} .. {last}); training must use \
         only the clean-baseline day, rerun `flowseq ingest` to split train/test"
    )]
    CleanBaseline {
        days: usize,
        first: NaiveDate,
        last: NaiveDate,
    },

    #[error("token index {index} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { index: u32, vocab_size: usize },

    #[error("invalid context window: {0}")]
    InvalidContext(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("need at least {needed} {what}, got {got}")]
    InsufficientData {
        what: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("no label for row {0}")]
    MissingLabel(u64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing artifact {path}; run `flowseq {producer}` first")]
    MissingArtifact {
        path: PathBuf,
        producer: &'static str,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
