//! Symmetric solves for `(K + λI) W = Y`.

use faer::linalg::solvers::{Lblt, Llt, Solve};
use faer::{Mat, Side};
use nalgebra::DMatrix;

use crate::error::{KflowError, Result};

const RESIDUAL_TOL: f64 = 1e-8;

enum Factor {
    Cholesky(Llt<f64>),
    BunchKaufman(Lblt<f64>),
}

/// Factorization of `K + λI`. Cholesky is tried first; indefinite systems fall
/// back to Bunch–Kaufman `LBLᵀ` with diagonal pivoting.
pub struct SymmetricSolver {
    matrix: DMatrix<f64>,
    factor: Factor,
}

fn to_faer(m: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Smallest and largest magnitude over the 1×1 and 2×2 pivot blocks of `B`.
fn pivot_range(f: &Lblt<f64>) -> (f64, f64) {
    let (d, e) = (f.B_diag(), f.B_subdiag());
    let n = d.dim();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    let mut i = 0;
    while i < n {
        if i + 1 < n && e[i] != 0.0 {
            let (a, b, c) = (d[i], e[i], d[i + 1]);
            let mean = 0.5 * (a + c);
            let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            let (l1, l2) = ((mean - rad).abs(), (mean + rad).abs());
            lo = lo.min(l1.min(l2));
            hi = hi.max(l1.max(l2));
            i += 2;
        } else {
            lo = lo.min(d[i].abs());
            hi = hi.max(d[i].abs());
            i += 1;
        }
    }
    (lo, hi)
}

impl SymmetricSolver {
    /// Factorizes `gram + lambda · I`.
    pub fn new(gram: &DMatrix<f64>, lambda: f64) -> Result<Self> {
        let n = gram.nrows();
        if n != gram.ncols() {
            return Err(KflowError::DimensionMismatch(format!(
                "gram matrix is {}x{}",
                gram.nrows(),
                gram.ncols()
            )));
        }
        let mut a = gram.clone();
        for i in 0..n {
            a[(i, i)] += lambda;
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(KflowError::Factorization {
                size: n,
                reason: "matrix has non-finite entries".into(),
            });
        }
        let fa = to_faer(&a);
        let factor = match fa.llt(Side::Lower) {
            Ok(c) => Factor::Cholesky(c),
            Err(_) => {
                let f = fa.lblt(Side::Lower);
                let (lo, hi) = pivot_range(&f);
                if !(lo > hi * f64::EPSILON * n as f64) {
                    return Err(KflowError::Factorization {
                        size: n,
                        reason: format!(
                            "system is numerically singular (pivot ratio {:.3e}, lambda1 = {lambda})",
                            lo / hi
                        ),
                    });
                }
                Factor::BunchKaufman(f)
            }
        };
        Ok(Self { matrix: a, factor })
    }

    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    /// True when the system was positive definite.
    pub fn is_positive_definite(&self) -> bool {
        matches!(self.factor, Factor::Cholesky(_))
    }

    /// Solves `A X = B` and checks the relative residual.
    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.size() {
            return Err(KflowError::DimensionMismatch(format!(
                "right-hand side has {} rows, system has {}",
                b.nrows(),
                self.size()
            )));
        }
        let rhs = to_faer(b);
        let sol = match &self.factor {
            Factor::Cholesky(c) => c.solve(&rhs),
            Factor::BunchKaufman(f) => f.solve(&rhs),
        };
        let x = DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| sol[(i, j)]);
        let residual = (&self.matrix * &x - b).norm();
        let scale = b.norm().max(f64::MIN_POSITIVE);
        let rel = residual / scale;
        if !(rel <= RESIDUAL_TOL) {
            return Err(KflowError::Factorization {
                size: self.size(),
                reason: format!("relative residual {rel:.3e} exceeds {RESIDUAL_TOL:e}"),
            });
        }
        Ok(x)
    }
}
