use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("misaligned corpus: source has {source_lines} lines, target has {target_lines}")]
    MisalignedCorpus { source_lines: u64, target_lines: u64 },

    #[error("invalid UTF-8 in {path} at byte offset {offset}")]
    InvalidEncoding { path: PathBuf, offset: u64 },

    #[error("cannot sample {requested} records from a corpus of {available}")]
    SampleTooLarge { requested: u64, available: u64 },

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("truncated file {path}: expected {expected} bytes, found {actual}")]
    TruncatedFile {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: u64, col: u32 },

    #[error("invalid matrix shape: {0}")]
    Shape(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimsMismatch { expected: usize, actual: usize },

    #[error("degenerate sample: {rows} rows cannot yield {out_dims} components")]
    DegenerateSample { rows: u64, out_dims: usize },

    #[error("insufficient documents: need at least {needed}, stream held {available}")]
    InsufficientDocs { needed: usize, available: u64 },

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: u64, limit: u64 },

    #[error("corpus {0} has no target side")]
    MissingTarget(PathBuf),

    #[error("rank file missing: {0}")]
    MissingRankFile(PathBuf),

    #[error("empty matrix")]
    EmptyMatrix,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("embedding backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("stage `{stage}` failed: {source}")]
    StageFailed {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors detected before any expensive work is started.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation(_))
    }
}

/// Attaches a path to raw `io::Error`s.
pub(crate) trait IoContext<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
