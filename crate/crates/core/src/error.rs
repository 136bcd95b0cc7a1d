use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("a bag must contain at least one instance")]
    EmptyBag,

    #[error("target is not a one-hot vector: {0:?}")]
    NotOneHot(Vec<f64>),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("infeasible scenario: {0}")]
    InfeasibleScenario(String),

    #[error("invalid class counts {counts:?}: {reason}")]
    InvalidCounts { counts: Vec<usize>, reason: String },

    #[error("{}: row {row}: {message}", path.display())]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    /// `batch` is 1-based; 0 means the validation pass after the epoch.
    #[error("training diverged at epoch {epoch}, {}: loss = {loss}", at_batch(*.batch))]
    Divergence {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

fn at_batch(batch: usize) -> String {
    if batch == 0 {
        "validation".to_owned()
    } else {
        format!("batch {batch}")
    }
}
