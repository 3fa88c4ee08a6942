//! Error type shared by every module in the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed NIfTI header; `field` names the offending header field.
    #[error("invalid NIfTI header in {path}: field `{field}`: {reason}")]
    HeaderField {
        path: PathBuf,
        field: &'static str,
        reason: String,
    },

    #[error("unsupported NIfTI datatype code {code} in {path} (supported: uint8=2, int16=4, float32=16)")]
    UnsupportedDtype { path: PathBuf, code: i16 },

    #[error("non-finite voxel value at linear index {index} in {path}")]
    NonFiniteVoxel { path: PathBuf, index: usize },

    /// Two volumes that must share a grid do not; `field` is the first
    /// differing geometry field (shape, spacing or affine).
    #[error("geometry mismatch on `{field}`: {left} vs {right}")]
    GeometryMismatch {
        field: &'static str,
        left: String,
        right: String,
    },

    #[error("unknown region `{name}` (valid: {valid})")]
    UnknownRegion { name: String, valid: String },

    #[error("voxel code {code} is not in the label encoding")]
    UnknownLabelCode { code: u8 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("malformed JSON in {path}: {reason}")]
    Json { path: PathBuf, reason: String },

    #[error("referenced file does not exist: {path} ({context})")]
    MissingFile { path: PathBuf, context: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Process exit code convention: 1 for environment/I/O trouble, 2 for
    /// anything traceable to user input (bad files, paths, configs).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 1,
            _ => 2,
        }
    }
}
