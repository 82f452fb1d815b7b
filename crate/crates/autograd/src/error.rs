use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, AutogradError>;
