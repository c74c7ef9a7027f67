//! Error types shared across the crate.

use thiserror::Error;

/// One row of the calibration iteration trace, kept on failure for diagnosis.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TraceEntry {
    pub q_lower: f64,
    pub q_upper: f64,
    pub r_lower: f64,
    pub r_upper: f64,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("split leaves an empty part: {0}")]
    EmptySplit(String),

    #[error(
        "calibration set too small: alpha' = {alpha_prime} <= 0 for alpha = {alpha}, n = {n_calib}"
    )]
    CalibSetTooSmall {
        alpha: f64,
        alpha_prime: f64,
        n_calib: usize,
    },

    #[error(
        "calibration failed after {iterations} iterations: risk {achieved_risk} > alpha' = {alpha_prime}"
    )]
    CalibrationFailed {
        iterations: usize,
        achieved_risk: f64,
        alpha_prime: f64,
        trace: Vec<TraceEntry>,
    },

    #[error("quantile bounds collapsed: q_lower = {q_lower} >= q_upper = {q_upper}")]
    BoundsCollapse { q_lower: f64, q_upper: f64 },

    #[error(
        "baseline calibration failed: risk {risk} > alpha' = {alpha_prime} at lambda_max = {lambda_max}"
    )]
    BaselineFailed {
        risk: f64,
        alpha_prime: f64,
        lambda_max: f64,
    },

    #[error("non-finite loss {value} at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        value: f64,
        epoch: usize,
        step: usize,
    },

    #[error("conformalized pdf: calibration failed for alpha values {failed:?}")]
    PartialPdf { failed: Vec<f64> },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
