use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("numeric failure in {op} at iteration {iteration}")]
    Numeric { op: &'static str, iteration: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sequence length mismatch: configured {configured}, got {runtime}")]
    SeqLen { configured: usize, runtime: usize },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("unsupported format version {found} (expected {expected})")]
    UnknownVersion { found: u32, expected: u32 },

    #[error("truncated file {path}: needed {needed} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        needed: u64,
        found: u64,
    },

    #[error("checksum mismatch in {path}: stored {stored:016x}, computed {computed:016x}")]
    Checksum {
        path: PathBuf,
        stored: u64,
        computed: u64,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing prerequisite: {0}")]
    Missing(PathBuf),

    #[error("refusing to overwrite {0} (pass --force)")]
    Exists(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end: 1 for invalid
    /// input or configuration, 2 for unreadable or corrupt files, 3 for
    /// numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::UnknownVersion { .. }
            | Error::Truncated { .. }
            | Error::Checksum { .. }
            | Error::Format { .. } => 2,
            Error::NonFinite { .. } | Error::Numeric { .. } => 3,
            _ => 1,
        }
    }
}
