//! Evaluation metrics for simulated test points.

use crate::error::{GrfError, Result};
use crate::inference::ConfidenceInterval;

fn check_lengths(left: usize, right: usize) -> Result<()> {
    if left != right || left == 0 {
        return Err(GrfError::LengthMismatch { left, right });
    }
    Ok(())
}

/// Mean squared difference between estimates and truths.
pub fn mse(estimates: &[f64], truths: &[f64]) -> Result<f64> {
    check_lengths(estimates.len(), truths.len())?;
    let total: f64 = estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| (e - t) * (e - t))
        .sum();
    Ok(total / estimates.len() as f64)
}

/// Fraction of targets inside their (closed) interval.
pub fn coverage(intervals: &[ConfidenceInterval], targets: &[f64]) -> Result<f64> {
    check_lengths(intervals.len(), targets.len())?;
    let hits = intervals
        .iter()
        .zip(targets)
        .filter(|(ci, t)| ci.contains(**t))
        .count();
    Ok(hits as f64 / targets.len() as f64)
}
