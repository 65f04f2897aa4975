use alloc::string::String;
use alloc::vec::Vec;

/// Everything that can go wrong inside the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{field}: {reason}")]
    Invalid { field: &'static str, reason: String },

    #[error("exit {index} out of range 1..={exits}")]
    ExitOutOfRange { index: usize, exits: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("example {index}: label {label} out of range for {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("confusion matrix is empty")]
    EmptyConfusionMatrix,

    #[error("non-finite gradient in `{param}` (epoch {epoch}, step {step})")]
    NonFiniteGradient {
        param: String,
        epoch: usize,
        step: usize,
    },

    #[error("non-finite value at {location}")]
    NonFinite { location: String },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::Invalid {
        field,
        reason: reason.into(),
    }
}
