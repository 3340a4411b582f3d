//! Prediction-error metrics: GMAE and MAPE over paired latency vectors.
//!
//! Both metrics consume the per-sample relative errors `|pred - actual| /
//! actual`. GMAE takes their geometric mean, which damps outliers; MAPE
//! takes their arithmetic mean. By the AM-GM inequality GMAE <= MAPE
//! whenever every relative error is at least the epsilon floor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to relative errors inside [`gmae`] so that exact
/// predictions do not produce `ln(0)`.
pub const REL_ERR_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("prediction and reference lengths differ: {pred} vs {actual}")]
    LengthMismatch { pred: usize, actual: usize },
    #[error("reference value at index {index} is not positive: {value}")]
    NonPositiveActual { index: usize, value: f64 },
}

/// Summary of prediction error over a sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Geometric mean of absolute relative errors.
    pub gmae: f64,
    /// Arithmetic mean of absolute relative errors.
    pub mape: f64,
    /// Population standard deviation of the relative errors.
    pub std: f64,
    /// Number of sample pairs.
    pub n: usize,
}

fn relative_errors(pred: &[f64], actual: &[f64]) -> Result<Vec<f64>, MetricError> {
    if pred.len() != actual.len() {
        return Err(MetricError::LengthMismatch {
            pred: pred.len(),
            actual: actual.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricError::LengthMismatch { pred: 0, actual: 0 });
    }
    actual
        .iter()
        .enumerate()
        .map(|(index, &a)| {
            if !a.is_finite() || a <= 0.0 {
                return Err(MetricError::NonPositiveActual { index, value: a });
            }
            Ok((pred[index] - a).abs() / a)
        })
        .collect()
}

/// Geometric mean absolute relative error.
pub fn gmae(pred: &[f64], actual: &[f64]) -> Result<f64, MetricError> {
    let errs = relative_errors(pred, actual)?;
    let log_sum: f64 = errs
        .iter()
        // floor without masking NaN: a NaN prediction must surface as NaN
        .map(|&e| if e < REL_ERR_FLOOR { REL_ERR_FLOOR } else { e }.ln())
        .sum();
    Ok((log_sum / errs.len() as f64).exp())
}

/// Mean absolute percentage error, as a fraction.
pub fn mape(pred: &[f64], actual: &[f64]) -> Result<f64, MetricError> {
    let errs = relative_errors(pred, actual)?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Computes the full [`MetricReport`] for a prediction/reference pair.
pub fn report(pred: &[f64], actual: &[f64]) -> Result<MetricReport, MetricError> {
    let errs = relative_errors(pred, actual)?;
    let n = errs.len();
    let mean = errs.iter().sum::<f64>() / n as f64;
    let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n as f64;
    Ok(MetricReport {
        gmae: gmae(pred, actual)?,
        mape: mean,
        std: var.sqrt(),
        n,
    })
}
