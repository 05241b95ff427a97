use thiserror::Error;

use crate::volume::VolumeKind;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("truncated header")]
    TruncatedHeader,
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("header/payload length mismatch: header implies {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("point outside the volume along {axis}: {value} not in [{lo}, {hi}]")]
    OutOfBounds { axis: char, value: f64, lo: f64, hi: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("{op} expects a {expected:?} volume, got {found:?}")]
    Kind {
        op: &'static str,
        expected: VolumeKind,
        found: VolumeKind,
    },
    #[error("volumes disagree: {0}")]
    Mismatch(String),
    #[error("surface of an empty mask is undefined")]
    EmptySurface,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
