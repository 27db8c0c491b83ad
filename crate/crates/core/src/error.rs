use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::lockword::LockWordError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("corrupt manifest {path}: {reason}")]
    CorruptManifest { path: PathBuf, reason: String },
    #[error("checksum mismatch in {0}")]
    ChecksumMismatch(PathBuf),
    #[error("data directory {0} is locked by another store")]
    LockHeld(PathBuf),
    #[error("key not found")]
    NotFound,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("shape mismatch: expected {expected} values, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("duplicate key {0:#x} in batch")]
    DuplicateKey(u64),
    #[error("model id {0} out of range (at most 65535 models)")]
    TooManyModels(u32),
    #[error("feature id {0:#x} exceeds 48 bits")]
    KeyOutOfRange(u64),
    #[error("prefetch token was not issued by this store")]
    UnknownToken,
    #[error("store is not empty")]
    StoreNotEmpty,
    #[error("too many concurrent sessions")]
    TooManySessions,
    #[error("holdout contains a single label class")]
    DegenerateLabels,
    #[error("lock word: {0}")]
    LockWord(#[from] LockWordError),
    #[error("invalid dataset: {0}")]
    Dataset(String),
}

impl Error {
    /// Stable error name, used when errors cross a language boundary.
    pub fn name(&self) -> &'static str {
        match self {
            Error::Io(_) => "IoError",
            Error::Config(_) => "ConfigError",
            Error::CorruptManifest { .. } => "CorruptManifest",
            Error::ChecksumMismatch(_) => "ChecksumMismatch",
            Error::LockHeld(_) => "LockHeld",
            Error::NotFound => "NotFound",
            Error::DimMismatch { .. } => "DimMismatch",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::DuplicateKey(_) => "DuplicateKey",
            Error::TooManyModels(_) => "TooManyModels",
            Error::KeyOutOfRange(_) => "KeyOutOfRange",
            Error::UnknownToken => "UnknownToken",
            Error::StoreNotEmpty => "StoreNotEmpty",
            Error::TooManySessions => "TooManySessions",
            Error::DegenerateLabels => "DegenerateLabels",
            Error::LockWord(LockWordError::FieldOverflow(_)) => "FieldOverflow",
            Error::LockWord(LockWordError::StalenessCounterSaturated) => "StalenessCounterSaturated",
            Error::LockWord(LockWordError::NotLocked) => "NotLocked",
            Error::LockWord(LockWordError::Underflow) => "Underflow",
            Error::Dataset(_) => "DatasetError",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
