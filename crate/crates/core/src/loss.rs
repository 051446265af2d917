//! Kernel Flows loss and its gradient.
//!
//! For nested batches `c ⊂ b` the loss is
//! `ρ = 1 − tr(Y_cᵀ A_c⁻¹ Y_c) / tr(Y_bᵀ A_b⁻¹ Y_b)` with `A = K + λ₁I`, and the
//! sparse objective adds `λ₂‖α‖₁`. Multi-output targets sum the per-column
//! quadratic forms.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{KflowError, Result};
use crate::kernels::{gram_from_rows, rows_of, weighted_gram_gradient, GradParts, KernelParams, ParamIndex, NUM_KERNELS, NUM_PARAMS, NUM_THETA};
use crate::linalg::SymmetricSolver;

/// `K(X, X)` together with a factorization of `K + λ₁I`.
pub struct RidgeSystem {
    gram: DMatrix<f64>,
    lambda1: f64,
    solver: SymmetricSolver,
}

impl RidgeSystem {
    pub fn new(params: &KernelParams, x: &DMatrix<f64>, lambda1: f64) -> Result<Self> {
        Self::from_rows(params, &rows_of(x), x.ncols(), lambda1)
    }

    pub(crate) fn from_rows(params: &KernelParams, rows: &[f64], p: usize, lambda1: f64) -> Result<Self> {
        if !(lambda1 >= 0.0) {
            return Err(KflowError::InvalidArgument(format!("lambda1 must be nonnegative, got {lambda1}")));
        }
        if rows.is_empty() {
            return Err(KflowError::InvalidArgument("ridge system needs at least one point".into()));
        }
        let gram = gram_from_rows(params, rows, p)?;
        let solver = SymmetricSolver::new(&gram, lambda1)?;
        Ok(Self { gram, lambda1, solver })
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn is_positive_definite(&self) -> bool {
        self.solver.is_positive_definite()
    }

    /// `(K + λ₁I)⁻¹ Y`.
    pub fn solve(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.solver.solve(y)
    }

    /// `tr(Yᵀ (K + λ₁I)⁻¹ Y)` and the solved coefficients.
    pub fn quadratic_form(&self, y: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
        let z = self.solve(y)?;
        Ok((y.dot(&z), z))
    }
}

/// Loss components for one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rho: f64,
    pub l1_penalty: f64,
    pub total: f64,
    pub numerator_qf: f64,
    pub denominator_qf: f64,
}

impl LossBreakdown {
    fn new(numerator_qf: f64, denominator_qf: f64, l1_penalty: f64) -> Result<Self> {
        if !(denominator_qf > 0.0) {
            return Err(KflowError::DegenerateBatch(denominator_qf));
        }
        let rho = 1.0 - numerator_qf / denominator_qf;
        if !rho.is_finite() {
            return Err(KflowError::DegenerateBatch(denominator_qf));
        }
        Ok(Self {
            rho,
            l1_penalty,
            total: rho + l1_penalty,
            numerator_qf,
            denominator_qf,
        })
    }
}

/// Smooth-part gradient of the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGradient {
    pub alpha: [f64; NUM_KERNELS],
    pub theta: [f64; NUM_THETA],
}

impl LossGradient {
    fn from_flat(flat: &[f64; NUM_PARAMS]) -> Self {
        let mut alpha = [0.0; NUM_KERNELS];
        let mut theta = [0.0; NUM_THETA];
        alpha.copy_from_slice(&flat[..NUM_KERNELS]);
        theta.copy_from_slice(&flat[NUM_KERNELS..]);
        Self { alpha, theta }
    }

    pub fn get(&self, idx: ParamIndex) -> f64 {
        match idx {
            ParamIndex::Alpha(i) => self.alpha[i],
            ParamIndex::Theta(j) => self.theta[j],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.iter().chain(&self.theta).all(|v| v.is_finite())
    }
}

fn check_xy(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(KflowError::DimensionMismatch(format!(
            "X has {} rows but Y has {}",
            x.nrows(),
            y.nrows()
        )));
    }
    Ok(())
}

/// `Σ_j Y_jᵀ (K + λ₁I)⁻¹ Y_j` over the output columns.
pub fn regularized_quadratic_form(params: &KernelParams, x: &DMatrix<f64>, y: &DMatrix<f64>, lambda1: f64) -> Result<f64> {
    check_xy(x, y)?;
    Ok(RidgeSystem::new(params, x, lambda1)?.quadratic_form(y)?.0)
}

/// The Kernel Flows loss `1 − qf(X_c, Y_c) / qf(X_b, Y_b)`.
pub fn rho(
    params: &KernelParams,
    xb: &DMatrix<f64>,
    yb: &DMatrix<f64>,
    xc: &DMatrix<f64>,
    yc: &DMatrix<f64>,
    lambda1: f64,
) -> Result<f64> {
    Ok(sparse_loss(params, xb, yb, xc, yc, lambda1, 0.0)?.rho)
}

/// `ρ + λ₂‖α‖₁` with all components.
pub fn sparse_loss(
    params: &KernelParams,
    xb: &DMatrix<f64>,
    yb: &DMatrix<f64>,
    xc: &DMatrix<f64>,
    yc: &DMatrix<f64>,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossBreakdown> {
    if !(lambda2 >= 0.0) {
        return Err(KflowError::InvalidArgument(format!("lambda2 must be nonnegative, got {lambda2}")));
    }
    check_xy(xb, yb)?;
    check_xy(xc, yc)?;
    let qb = regularized_quadratic_form(params, xb, yb, lambda1)?;
    let qc = regularized_quadratic_form(params, xc, yc, lambda1)?;
    LossBreakdown::new(qc, qb, lambda2 * params.l1_norm())
}

/// Gradient of `ρ` (the smooth part; the ℓ₁ term is left to the proximal step).
///
/// Uses `∂(Yᵀ A⁻¹ Y)/∂p = −Yᵀ A⁻¹ (∂K/∂p) A⁻¹ Y` for both quadratic forms and
/// the quotient rule, so `∂ρ/∂p = Σ_ij ∂K_ij/∂p · W_ij` with
/// `W = Z_c Z_cᵀ / q_b` on the c-block and `−q_c/q_b² · Z_b Z_bᵀ` on the b-block.
pub fn grad_loss(
    params: &KernelParams,
    xb: &DMatrix<f64>,
    yb: &DMatrix<f64>,
    xc: &DMatrix<f64>,
    yc: &DMatrix<f64>,
    lambda1: f64,
) -> Result<LossGradient> {
    check_xy(xb, yb)?;
    check_xy(xc, yc)?;
    let (rb, rc) = (rows_of(xb), rows_of(xc));
    let p = xb.ncols();
    let sys_b = RidgeSystem::from_rows(params, &rb, p, lambda1)?;
    let sys_c = RidgeSystem::from_rows(params, &rc, p, lambda1)?;
    let (qb, zb) = sys_b.quadratic_form(yb)?;
    let (qc, zc) = sys_c.quadratic_form(yc)?;
    LossBreakdown::new(qc, qb, 0.0)?;
    let wb = (&zb * zb.transpose()) * (-qc / (qb * qb));
    let wc = (&zc * zc.transpose()) / qb;
    let gb = weighted_gram_gradient(params, &rb, p, &wb, GradParts::All)?;
    let gc = weighted_gram_gradient(params, &rc, p, &wc, GradParts::All)?;
    let mut flat = [0.0; NUM_PARAMS];
    for (f, (a, b)) in flat.iter_mut().zip(gb.iter().zip(&gc)) {
        *f = a + b;
    }
    Ok(LossGradient::from_flat(&flat))
}

/// Loss and gradient for a batch `b` whose subset `c` is given by positions
/// into the batch. One pass over the batch pairs serves both quadratic forms.
pub(crate) fn nested_loss_and_grad(
    params: &KernelParams,
    batch_rows: &[f64],
    p: usize,
    yb: &DMatrix<f64>,
    c_positions: &[usize],
    lambda1: f64,
    parts: GradParts,
) -> Result<(LossBreakdown, LossGradient)> {
    let sys_b = RidgeSystem::from_rows(params, batch_rows, p, lambda1)?;
    let a_c = sys_b.gram().select_rows(c_positions).select_columns(c_positions);
    let solver_c = SymmetricSolver::new(&a_c, lambda1)?;
    let yc = yb.select_rows(c_positions);
    let (qb, zb) = sys_b.quadratic_form(yb)?;
    let zc = solver_c.solve(&yc)?;
    let qc = yc.dot(&zc);
    let loss = LossBreakdown::new(qc, qb, 0.0)?;

    let mut w = (&zb * zb.transpose()) * (-qc / (qb * qb));
    for (i, &ci) in c_positions.iter().enumerate() {
        for (j, &cj) in c_positions.iter().enumerate() {
            w[(ci, cj)] += zc.row(i).dot(&zc.row(j)) / qb;
        }
    }
    let flat = weighted_gram_gradient(params, batch_rows, p, &w, parts)?;
    Ok((loss, LossGradient::from_flat(&flat)))
}
