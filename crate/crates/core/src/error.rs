use thiserror::Error;

/// Errors raised while reading, validating or interpreting prediction logs.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("inconsistent record: {0}")]
    Inconsistent(String),
    #[error("no records")]
    Empty,
    #[error("record ({seq_id}, t={t}): gold token has zero probability, NLL is infinite")]
    ZeroGoldProbability { seq_id: String, t: u32 },
    #[error("record ({seq_id}, t={t}) has no attention, cumulative attention or features")]
    MissingFeatures { seq_id: String, t: u32 },
    #[error("sequence `{seq_id}`: {reason}")]
    Sequence { seq_id: String, reason: String },
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<DataError>,
    },
    #[error("io error: {0}")]
    Io(String),
}

impl DataError {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        DataError::Invalid {
            field,
            reason: reason.into(),
        }
    }

    /// Attaches a 1-based line number to an error raised while processing a
    /// line of a log file.
    pub fn at_line(self, line: usize) -> Self {
        match self {
            DataError::Parse { column, message, .. } => DataError::Parse { line, column, message },
            other => DataError::AtLine {
                line,
                source: Box::new(other),
            },
        }
    }

    /// Short stable label used for tallying errors in validation summaries.
    pub fn kind(&self) -> String {
        match self {
            DataError::Parse { .. } => "parse".to_string(),
            DataError::Invalid { field, .. } => format!("invalid:{field}"),
            DataError::Inconsistent(_) => "inconsistent".to_string(),
            DataError::Empty => "empty".to_string(),
            DataError::ZeroGoldProbability { .. } => "zero_gold_probability".to_string(),
            DataError::MissingFeatures { .. } => "missing_features".to_string(),
            DataError::Sequence { .. } => "sequence".to_string(),
            DataError::AtLine { source, .. } => source.kind(),
            DataError::Io(_) => "io".to_string(),
        }
    }
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e.to_string())
    }
}

/// Errors surfaced by a [`crate::ScoringModel`] or while decoding with one.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model emitted an invalid distribution at step {step}: {reason}")]
    InvalidDistribution { step: usize, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Errors raised while fitting a calibrator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("validation set is empty")]
    EmptyDataset,
    #[error("non-finite loss at iteration {iteration} (record {record})")]
    NonFinite { iteration: usize, record: String },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
}
