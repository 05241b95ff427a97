use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("{layer}: expected shape {expected}, got {actual:?}")]
    Shape {
        layer: &'static str,
        expected: String,
        actual: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GradError {
    pub(crate) fn shape(layer: &'static str, expected: impl Into<String>, actual: &[usize]) -> Self {
        GradError::Shape {
            layer,
            expected: expected.into(),
            actual: actual.to_vec(),
        }
    }
}

pub type Result<T, E = GradError> = std::result::Result<T, E>;
