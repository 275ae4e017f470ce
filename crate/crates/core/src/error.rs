use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("forward cache is stale or missing: {0}")]
    StaleCache(&'static str),

    #[error("pixel value {value} at index {index} is outside [0, 1]")]
    PixelOutOfRange { index: usize, value: f64 },

    #[error("unexpected magic 0x{found:08x} (expected 0x{expected:08x})")]
    UnexpectedMagic { expected: u32, found: u32 },

    #[error("truncated payload: need {needed} bytes, have {available}")]
    TruncatedPayload { needed: usize, available: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {}",
        format_norms(.param_norms)
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        param_norms: Vec<(String, f64)>,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_norms(norms: &[(String, f64)]) -> String {
    norms
        .iter()
        .map(|(name, n)| format!("{name}={n:.6e}"))
        .collect::<Vec<_>>()
        .join(", ")
}
