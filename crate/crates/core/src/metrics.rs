//! Forecast scores: SMAPE and Hausdorff distance.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KflowError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastScore {
    /// Percent, in `[0, 200]`.
    pub smape: f64,
    pub hausdorff: f64,
    pub n_test: usize,
}

/// Symmetric mean absolute percentage error in percent, averaged over all
/// `M·d` coordinates. Coordinates where both values are zero contribute 0.
pub fn smape(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(KflowError::DimensionMismatch(format!(
            "prediction is {:?}, truth is {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if pred.nrows() == 0 || pred.ncols() == 0 {
        return Err(KflowError::InvalidArgument("smape needs at least one sample".into()));
    }
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(truth.iter()) {
        let denom = (p.abs() + t.abs()) / 2.0;
        if denom > 0.0 {
            sum += (p - t).abs() / denom;
        }
    }
    Ok(100.0 * sum / pred.len() as f64)
}

fn directed(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let d = a.ncols();
    let (ra, rb) = (crate::kernels::rows_of(a), crate::kernels::rows_of(b));
    (0..a.nrows())
        .into_par_iter()
        .map(|i| {
            let pa = &ra[i * d..(i + 1) * d];
            rb.chunks_exact(d)
                .map(|pb| pa.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(|| 0.0, f64::max)
        .sqrt()
}

/// Hausdorff distance between two point sets (one point per row), exact.
pub fn hausdorff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(KflowError::InvalidArgument("hausdorff needs two nonempty point sets".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(KflowError::DimensionMismatch(format!(
            "point sets live in R^{} and R^{}",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(directed(a, b).max(directed(b, a)))
}
