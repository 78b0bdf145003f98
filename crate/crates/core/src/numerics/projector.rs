use serde::{Deserialize, Serialize};

use crate::cost;
use crate::error::{Error, Result};

use super::eigen::{sym_eig, DEFAULT_TOL};
use super::matrix::{axpy, dot};
use super::Matrix;

/// Orthogonal projector `P = B Bᵀ` onto the span of an orthonormal basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    /// `d × m`, orthonormal columns.
    basis: Matrix,
}

impl Projector {
    /// Wraps a basis assumed to have orthonormal columns.
    pub fn from_basis(basis: Matrix) -> Self {
        Self { basis }
    }

    pub fn identity(d: usize) -> Self {
        Self::from_basis(Matrix::identity(d))
    }

    pub fn zero(d: usize) -> Self {
        Self::from_basis(Matrix::zeros(d, 0))
    }

    /// Ambient dimension `d`.
    pub fn ambient_dim(&self) -> usize {
        self.basis.rows()
    }

    /// Subspace rank `m`.
    pub fn dimension(&self) -> usize {
        self.basis.cols()
    }

    /// True when the subspace is `{0}`.
    pub fn is_empty(&self) -> bool {
        self.dimension() == 0
    }

    pub fn is_identity(&self) -> bool {
        self.dimension() == self.ambient_dim()
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    /// Dense `P = B Bᵀ`.
    pub fn matrix(&self) -> Matrix {
        self.basis.gram_rows()
    }

    /// `P v`, computed as `B (Bᵀ v)`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let d = self.ambient_dim();
        debug_assert_eq!(v.len(), d);
        if self.is_identity() {
            return v.to_vec();
        }
        let m = self.dimension();
        let mut coeff = vec![0.0; m];
        for (i, &vi) in v.iter().enumerate() {
            if vi != 0.0 {
                axpy(vi, self.basis.row(i), &mut coeff);
            }
        }
        let out = (0..d).map(|i| dot(self.basis.row(i), &coeff)).collect();
        cost::add(4 * (d * m) as u64);
        out
    }

    /// Projects `v` in place.
    pub fn apply_in_place(&self, v: &mut [f64]) {
        if !self.is_identity() {
            let p = self.apply(v);
            v.copy_from_slice(&p);
        }
    }
}

/// Projector onto the approximate null space of `X Xᵀ` for a `d × N` matrix.
///
/// The basis is every eigenvector of `X Xᵀ` whose eigenvalue is below
/// `eps`; the threshold applies to raw (unnormalized) eigenvalues. An empty
/// result (`dimension() == 0`) means no direction is safe.
pub fn nullspace_projector(x: &Matrix, eps: f64) -> Result<Projector> {
    Ok(nullspace_with_spectrum(x, eps)?.0)
}

/// Like [`nullspace_projector`] with the threshold optionally scaled by the
/// largest eigenvalue of `X Xᵀ`.
pub fn nullspace_projector_scaled(x: &Matrix, eps: f64, relative: bool) -> Result<Projector> {
    if !relative {
        return nullspace_projector(x, eps);
    }
    let lmax = sym_eig(&x.gram_rows(), DEFAULT_TOL)?.eigenvalues.first().copied().unwrap_or(0.0);
    nullspace_projector(x, eps * lmax.max(0.0))
}

/// Like [`nullspace_projector`], also returning the descending spectrum of
/// `X Xᵀ`.
pub fn nullspace_with_spectrum(x: &Matrix, eps: f64) -> Result<(Projector, Vec<f64>)> {
    if !(eps >= 0.0) {
        return Err(Error::contract(format!(
            "null-space threshold must be >= 0, got {eps}"
        )));
    }
    let cov = x.gram_rows();
    let eig = sym_eig(&cov, DEFAULT_TOL)?;
    let keep: Vec<usize> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, &l)| l < eps)
        .map(|(i, _)| i)
        .collect();
    let basis = eig.eigenvectors.select_cols(&keep);
    Ok((Projector::from_basis(basis), eig.eigenvalues))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_input() {
        let x = Matrix::from_cols(&[[1.0, 0.0]]).unwrap();
        let p = nullspace_projector(&x, 1e-2).unwrap();
        assert_eq!(p.dimension(), 1);
        let pm = p.matrix();
        assert!((pm.get(0, 0)).abs() < 1e-15);
        assert!((pm.get(1, 1) - 1.0).abs() < 1e-15);
        assert!(pm.get(0, 1).abs() < 1e-15);
    }

    #[test]
    fn full_rank_input_is_empty() {
        let p = nullspace_projector(&Matrix::identity(2), 1e-2).unwrap();
        assert!(p.is_empty());
        assert_eq!(p.apply(&[3.0, -1.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_input_is_everything() {
        let p = nullspace_projector(&Matrix::zeros(3, 0), 1e-2).unwrap();
        assert_eq!(p.dimension(), 3);
        assert!(p.is_identity());
    }

    #[test]
    fn negative_eps_rejected() {
        assert!(nullspace_projector(&Matrix::identity(2), -1.0).is_err());
    }
}
