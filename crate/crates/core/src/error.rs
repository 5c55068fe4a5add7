use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("wavelength {0} nm outside table coverage [{1}, {2}] nm")]
    OutOfRange(f64, f64, f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("illuminant integrates to zero luminance")]
    DegenerateIlluminant,
    #[error("spectrum map stack has no bands")]
    EmptyStack,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("direction {0} is not unit length")]
    NotNormalized(usize),
    #[error("pixel ({0}, {1}) outside image")]
    OutOfBounds(u32, u32),
    #[error("normal equations are singular")]
    SingularSystem,
    #[error("image dims {0}x{1} must be divisible by {2}")]
    BadDimensions(usize, usize, usize),
    #[error("image dimension {0} smaller than SSIM window {1}")]
    TooSmall(usize, usize),
    #[error("bad magic in {0}")]
    BadMagic(String),
    #[error("truncated file {0}")]
    TruncatedFile(String),
    #[error("dimension mismatch in {path}: {detail}")]
    DimMismatch { path: String, detail: String },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("bad partition: {0}")]
    BadPartition(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
