use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    Shape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: invalid parameter {name} = {value}")]
    Parameter {
        op: &'static str,
        name: &'static str,
        value: f64,
    },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("{op}: value {value} outside {expected}")]
    Range {
        op: &'static str,
        value: f64,
        expected: &'static str,
    },
    #[error("non-finite value at stage `{stage}`")]
    NonFinite { stage: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("gradient oracle: {0}")]
    Oracle(String),
}

impl Error {
    pub(crate) fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn shape(op: &'static str, shape: &[usize], reason: impl Into<String>) -> Self {
        Error::Shape {
            op,
            shape: shape.to_vec(),
            reason: reason.into(),
        }
    }
}
