use thiserror::Error;

/// Errors raised by setup routines (quadrature, meshes, numbering, operators).
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid deformation: minimum Jacobian determinant {min_det:e} in cell {cell}")]
    InvalidDeformation { cell: usize, min_det: f64 },
    #[error("degenerate cell {cell}: Jacobian determinant {det:e}")]
    DegenerateCell { cell: usize, det: f64 },
    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },
    #[error("operator diagonal entry {index} is not positive ({value:e})")]
    NotPositiveDefinite { index: usize, value: f64 },
    #[error("problem too large: {what} needs {size}, limit is {limit}")]
    SizeTooLarge { what: &'static str, size: usize, limit: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
