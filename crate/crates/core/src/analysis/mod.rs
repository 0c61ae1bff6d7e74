//! Representation probes: linear probing, taxonomy similarity deltas with a
//! Welch test, and PCA of paired representations.

pub mod genus;
pub mod pca;
pub mod probe;
pub mod stats;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("both samples have zero variance")]
    ZeroVariance,
    #[error("labels contain a single class")]
    SingleClass,
    #[error("rows have inconsistent widths")]
    Ragged,
    #[error("invalid probe config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

pub(crate) fn check_rect(rows: &[Vec<f64>]) -> Result<usize> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(AnalysisError::Ragged);
    }
    Ok(d)
}
