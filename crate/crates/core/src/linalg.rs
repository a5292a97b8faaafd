use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance for collinearity detection.
pub const RANK_TOL: f64 = 1e-10;

/// Least squares via thin QR. `x` must have full column rank.
pub fn lstsq(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    if x.ncols() == 0 {
        return Ok(DVector::zeros(0));
    }
    let qr = x.clone().qr();
    let qty = qr.q().transpose() * y;
    qr.r()
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::InvalidSpec("singular design in least squares".into()))
}

/// Orthonormal basis of the column space of a full-rank `x`.
pub fn orthonormal_basis(x: &DMatrix<f64>) -> DMatrix<f64> {
    if x.ncols() == 0 {
        return DMatrix::zeros(x.nrows(), 0);
    }
    x.clone().qr().q()
}

/// Inverse of a symmetric positive definite matrix, falling back to LU.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if let Some(ch) = m.clone().cholesky() {
        return Ok(ch.inverse());
    }
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidSpec("singular matrix".into()))
}

/// Greedy order-preserving rank screen.
///
/// Walks `columns` in order and keeps each one whose component orthogonal to
/// the already-kept columns has norm above `RANK_TOL * scale`.
#[derive(Clone)]
pub struct RankScreen {
    basis: Vec<DVector<f64>>,
}

impl RankScreen {
    pub fn new() -> Self {
        RankScreen { basis: Vec::new() }
    }

    /// Returns true and absorbs the column if it is independent.
    pub fn push(&mut self, col: &DVector<f64>, scale: f64) -> bool {
        let mut r = col.clone();
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for q in &self.basis {
                let c = q.dot(&r);
                r.axpy(-c, q, 1.0);
            }
        }
        let norm = r.norm();
        let scale = scale.max(col.norm());
        if norm <= RANK_TOL * scale || norm == 0.0 {
            return false;
        }
        self.basis.push(r / norm);
        true
    }
}

impl Default for RankScreen {
    fn default() -> Self {
        Self::new()
    }
}

pub fn column_vec(values: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(values)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}
