//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("axis {axis} has extent {extent}, not divisible by patch size {patch}")]
    NonDivisible {
        axis: char,
        extent: usize,
        patch: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("intensity out of [0, 1] at {context}: {value}")]
    IntensityRange { context: String, value: f64 },

    #[error("bad magic in {path}: expected `{expected}`")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("declared dimensions overflow in {path}")]
    DimensionOverflow { path: PathBuf },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("mask selects no voxels")]
    EmptyMask,

    #[error("zero-norm embedding row {row}")]
    ZeroNormRow { row: usize },

    #[error("degenerate probe set: inputs have zero variance")]
    DegenerateProbeSet,

    #[error("singular spectrum is all zero")]
    AllZeroSpectrum,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing input: {0}")]
    MissingInput(PathBuf),

    #[error("numerical abort at step {step}: {what}")]
    NumericalAbort { step: usize, what: String },

    #[error("probe labels contain a single class")]
    SingleClass,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
