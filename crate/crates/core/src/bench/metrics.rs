use nalgebra::DVector;

use crate::error::{Error, Result};

fn check_lengths<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("metrics need at least one step".into()));
    }
    Ok(())
}

/// Per-dimension mean absolute error over steps.
pub fn compute_mae(estimates: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<DVector<f64>> {
    check_lengths(estimates, truth)?;
    let dim = truth[0].len();
    let mut total = DVector::zeros(dim);
    for (e, t) in estimates.iter().zip(truth) {
        if e.len() != dim || t.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: e.len().min(t.len()),
            });
        }
        total += (e - t).abs();
    }
    Ok(total / estimates.len() as f64)
}

/// Mean Euclidean distance between 2-D positions.
pub fn compute_ade(predicted: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    check_lengths(predicted, truth)?;
    let total: f64 = predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| (p[0] - t[0]).hypot(p[1] - t[1]))
        .sum();
    Ok(total / predicted.len() as f64)
}
