use std::path::PathBuf;

/// Errors raised anywhere in the fusion pipeline.
///
/// Variants are grouped by failure class so callers (and the CLI exit-code
/// mapping) can distinguish bad input files from bad configuration from
/// numeric trouble during training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("invalid stream: {0}")]
    Validation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("record {record}: cannot resolve {path}")]
    UnresolvedPath { record: String, path: PathBuf },

    #[error("degenerate window: {0}")]
    DegenerateWindow(String),

    #[error("record {record} spans {span_seconds:.3}s, shorter than one {window_seconds}s window")]
    TooShort {
        record: String,
        span_seconds: f64,
        window_seconds: f64,
    },

    #[error("degenerate batch statistics: {0}")]
    DegenerateStatistics(String),

    #[error("window has no present frames")]
    EmptyWindow,

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("cannot vote over an empty prediction list")]
    EmptyVote,

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("dataset error: {0}")]
    Dataset(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
