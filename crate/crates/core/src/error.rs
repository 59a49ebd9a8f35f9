use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no fluid region: obstacle map is entirely solid")]
    NoFluidRegion,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("CFL violation: {0}")]
    CflViolation(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("undefined correlation: reference series has zero variance")]
    UndefinedCorrelation,
    #[error("zero reference: cannot calibrate scale against a zero field")]
    ZeroReference,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
