use std::io;

use thiserror::Error;

/// Every failure the laboratory can report.
#[derive(Debug, Error)]
pub enum ClaimeError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("numeric error: {message}")]
    Numeric { message: String, residuals: Vec<f64> },

    #[error("degenerate cohort: {0}")]
    DegenerateCohort(String),

    #[error("ingestion error at line {line}: {message}")]
    Ingest { line: usize, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("weight undefined for feature {feature} of modality {modality}: it never occurs in the cohort")]
    WeightUndefined { modality: u8, feature: usize },

    #[error("optimizer diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64, trace: Vec<f64> },

    #[error("similarity undefined: {0}")]
    UndefinedSimilarity(String),

    #[error("rank correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ClaimeError {
    pub(crate) fn numeric(message: impl Into<String>) -> Self {
        ClaimeError::Numeric { message: message.into(), residuals: Vec::new() }
    }
}

pub type Result<T> = std::result::Result<T, ClaimeError>;
