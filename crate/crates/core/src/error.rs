use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("attention memory is empty (need at least one memory element)")]
    EmptyMemory,

    #[error("sequence too short: need at least {needed} chunks, got {got}")]
    SequenceTooShort { needed: usize, got: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite loss {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("no valid anchored positions to evaluate")]
    EmptyReport,

    #[error("parse error at byte {offset}: {kind}")]
    Parse { offset: u64, kind: ParseErrorKind },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseErrorKind {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: Vec<u8>, expected: &'static str },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated input: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("row {row}: expected {expected} values, found {found}")]
    RowDimension { row: usize, expected: usize, found: usize },
    #[error("row {row}: label {label} out of range for {classes} classes")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("trailing data: {0} unexpected bytes")]
    TrailingBytes(usize),
    #[error("{0}")]
    Malformed(String),
}

impl Error {
    pub fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn parse(offset: u64, kind: ParseErrorKind) -> Self {
        Error::Parse { offset, kind }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
