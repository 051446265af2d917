//! Kernel ridge regressor `f(x) = K(x, X)(K(X, X) + λ₁I)⁻¹ Y` with one-step and
//! autonomous forecasts.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::embedding::DelayDataset;
use crate::error::{KflowError, Result};
use crate::kernels::{cross_gram, KernelParams};
use crate::loss::RidgeSystem;

const FIT_RESIDUAL_TOL: f64 = 1e-6;

/// A fitted regressor. Coefficients are `W = (K + λ₁I)⁻¹ Y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    #[serde(rename = "kernel")]
    pub params: KernelParams,
    pub lambda1: f64,
    pub tau: usize,
    #[serde(rename = "train_X", with = "row_major")]
    pub train_x: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub coefficients: DMatrix<f64>,
}

/// Matrices as arrays of rows.
pub mod row_major {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }
}

/// Result of an autonomous rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// One predicted state per row; truncated at divergence.
    pub states: DMatrix<f64>,
    /// Step (zero-based) whose prediction was non-finite, if any.
    pub diverged_at: Option<usize>,
}

/// Solves the ridge system on the dataset and checks the fit residual.
pub fn fit(params: &KernelParams, dataset: &DelayDataset, lambda1: f64) -> Result<TrainedModel> {
    if dataset.is_empty() {
        return Err(KflowError::InvalidArgument("cannot fit on an empty dataset".into()));
    }
    let system = RidgeSystem::new(params, dataset.x(), lambda1)?;
    let coefficients = system.solve(dataset.y())?;
    // K W + λ₁ W must reproduce Y.
    let recon = system.gram() * &coefficients + &coefficients * lambda1;
    let rel = (recon - dataset.y()).norm() / dataset.y().norm().max(f64::MIN_POSITIVE);
    if !(rel <= FIT_RESIDUAL_TOL) {
        return Err(KflowError::Factorization {
            size: dataset.len(),
            reason: format!("fit residual {rel:.3e} exceeds {FIT_RESIDUAL_TOL:e}"),
        });
    }
    Ok(TrainedModel {
        params: params.clone(),
        lambda1,
        tau: dataset.tau(),
        train_x: dataset.x().clone(),
        coefficients,
    })
}

impl TrainedModel {
    /// State dimension `d`.
    pub fn dim(&self) -> usize {
        self.coefficients.ncols()
    }

    /// Window length `τ·d`.
    pub fn window_len(&self) -> usize {
        self.train_x.ncols()
    }

    /// Predictions for every row of `windows`.
    pub fn predict(&self, windows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if windows.ncols() != self.window_len() {
            return Err(KflowError::DimensionMismatch(format!(
                "windows have {} columns, model expects {}",
                windows.ncols(),
                self.window_len()
            )));
        }
        if windows.nrows() == 0 {
            return Ok(DMatrix::zeros(0, self.dim()));
        }
        Ok(cross_gram(&self.params, windows, &self.train_x)? * &self.coefficients)
    }

    pub fn predict_one(&self, window: &[f64]) -> Result<Vec<f64>> {
        let q = DMatrix::from_row_slice(1, window.len(), window);
        Ok(self.predict(&q)?.row(0).iter().copied().collect())
    }

    /// Teacher-forced forecasts: row `i` predicts from the true window `test.X[i]`.
    pub fn one_step_forecast(&self, test: &DelayDataset) -> Result<DMatrix<f64>> {
        if test.tau() != self.tau || test.dim() != self.dim() {
            return Err(KflowError::DimensionMismatch(format!(
                "test set has tau={} d={}, model has tau={} d={}",
                test.tau(),
                test.dim(),
                self.tau,
                self.dim()
            )));
        }
        self.predict(test.x())
    }

    /// Autonomous iteration: each prediction is shifted into the newest slot of the window.
    pub fn rollout(&self, seed_window: &[f64], steps: usize) -> Result<Rollout> {
        if steps == 0 {
            return Err(KflowError::InvalidArgument("rollout needs at least one step".into()));
        }
        if seed_window.len() != self.window_len() {
            return Err(KflowError::DimensionMismatch(format!(
                "seed window has length {}, model expects {}",
                seed_window.len(),
                self.window_len()
            )));
        }
        let d = self.dim();
        let mut window = seed_window.to_vec();
        let mut out: Vec<f64> = Vec::with_capacity(steps * d);
        let mut diverged_at = None;
        for step in 0..steps {
            let next = match self.predict_one(&window) {
                Ok(v) => v,
                Err(KflowError::NonFiniteKernel { .. }) => {
                    diverged_at = Some(step);
                    break;
                }
                Err(e) => return Err(e),
            };
            if next.iter().any(|v| !v.is_finite()) {
                diverged_at = Some(step);
                break;
            }
            window.rotate_right(d);
            window[..d].copy_from_slice(&next);
            out.extend_from_slice(&next);
        }
        let rows = out.len() / d;
        Ok(Rollout {
            states: DMatrix::from_row_slice(rows, d, &out),
            diverged_at,
        })
    }
}
