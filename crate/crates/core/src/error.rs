use std::path::PathBuf;

use thiserror::Error;

/// Coarse classification used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments or configuration (exit code 2).
    Config,
    /// Malformed or inconsistent input data (exit code 3).
    Data,
    /// A numerical routine failed (exit code 4).
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: I/O error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic {found:?} at offset 0 (expected \"TFS1\")")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: unsupported dtype byte {found} at offset 4")]
    BadDtype { path: PathBuf, found: u8 },

    #[error("{path}: reserved header bytes at offset 5..8 must be zero")]
    BadReserved { path: PathBuf },

    #[error("{path}: truncated header: {found} bytes, need 24")]
    TruncatedHeader { path: PathBuf, found: usize },

    #[error("{path}: truncated payload at offset {offset}: header declares {expected} value bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        offset: u64,
        expected: u64,
        found: u64,
    },

    #[error("{path}: {extra} trailing bytes after payload end at offset {offset}")]
    TrailingBytes {
        path: PathBuf,
        offset: u64,
        extra: u64,
    },

    #[error("{path}: invalid shape {rows}x{cols} in header at offset 8")]
    BadShape { path: PathBuf, rows: u64, cols: u64 },

    #[error("non-finite value {value} at row {row}, column {col}{}", offset_suffix(*.offset))]
    NonFinite {
        row: usize,
        col: usize,
        value: f64,
        offset: Option<u64>,
    },

    #[error("id count mismatch: {ids} ids for {rows} rows{}", path_suffix(.path))]
    IdCount {
        ids: usize,
        rows: usize,
        path: Option<PathBuf>,
    },

    #[error("duplicate sample id {id:?}")]
    DuplicateId { id: String },

    #[error("{context}: shape mismatch, expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("{context}: sample ids differ at row {row} ({left:?} vs {right:?})")]
    IdMismatch {
        context: &'static str,
        row: usize,
        left: String,
        right: String,
    },

    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: malformed CSV: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{method} whitening failed after regularization (smallest eigenvalue {min_eigenvalue:e})")]
    Decomposition {
        method: &'static str,
        min_eigenvalue: f64,
    },

    #[error("whitened feature of sample {id:?} has zero norm")]
    ZeroNorm { id: String },

    #[error("sinkhorn encountered NaN at iteration {iteration}")]
    SinkhornNaN { iteration: usize },

    #[error("exact OT size guard exceeded: {rows}x{cols} > {limit} cells")]
    SizeGuard { rows: usize, cols: usize, limit: usize },

    #[error("exact OT did not terminate within {pivots} pivots")]
    SimplexStalled { pivots: usize },

    #[error("neighbor table exhausted at rank {rank} before reaching the requested selection size")]
    NeighborsExhausted { rank: usize },

    #[error("spearman correlation undefined: {0} input has zero variance")]
    ZeroVariance(&'static str),

    #[error("fingerprint mismatch: file has {found}, configuration expects {expected}")]
    FingerprintMismatch { expected: String, found: String },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => ErrorKind::Config,
            Error::Decomposition { .. }
            | Error::ZeroNorm { .. }
            | Error::SinkhornNaN { .. }
            | Error::SimplexStalled { .. }
            | Error::ZeroVariance(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

fn offset_suffix(offset: Option<u64>) -> String {
    match offset {
        Some(o) => format!(" (file offset {o})"),
        None => String::new(),
    }
}

fn path_suffix(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!(" in {}", p.display()),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
