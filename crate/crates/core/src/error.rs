use thiserror::Error;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {actual}")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("negative variance {value} at index {index}")]
    NegativeVariance { index: usize, value: f64 },
    #[error("{op} needs at least {required} samples, got {actual}")]
    InsufficientSamples {
        op: &'static str,
        required: usize,
        actual: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid model spec: {0}")]
    InvalidSpec(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("operation requires a {expected} model")]
    WrongTask { expected: &'static str },
}

pub(crate) fn ensure_len(op: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            op,
            expected,
            actual,
        })
    }
}

pub(crate) fn ensure_nonneg(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !(*v >= 0.0)) {
        None => Ok(()),
        Some(index) => Err(Error::NegativeVariance {
            index,
            value: values[index],
        }),
    }
}
