use crate::cost;
use crate::error::{Error, Result};

use super::Matrix;

/// Sweep cap for cyclic Jacobi.
pub const MAX_SWEEPS: usize = 100;

/// Default relative off-diagonal tolerance.
pub const DEFAULT_TOL: f64 = 1e-12;

/// Eigenpairs of a real symmetric matrix, sorted by descending eigenvalue.
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Column `i` is the unit eigenvector for `eigenvalues[i]`.
    pub eigenvectors: Matrix,
    pub sweeps: usize,
    /// Off-diagonal Frobenius norm of the rotated matrix at exit.
    pub residual: f64,
}

impl EigenDecomposition {
    /// `V Λ Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let s: f64 = (0..n)
                    .map(|k| v.get(i, k) * self.eigenvalues[k] * v.get(j, k))
                    .sum();
                out.set(i, j, s);
                out.set(j, i, s);
            }
        }
        out
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps over every `(p, q)` pair with `p < q`, annihilating `a_pq` with a
/// plane rotation, until the off-diagonal Frobenius norm falls below
/// `tol · ‖A‖_F` or [`MAX_SWEEPS`] is exhausted. Eigenvalues come back in
/// descending order; equal eigenvalues keep the order of their diagonal
/// positions.
pub fn sym_eig(a: &Matrix, tol: f64) -> Result<EigenDecomposition> {
    if !a.is_square() {
        return Err(Error::contract(format!(
            "sym_eig needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::contract(format!("sym_eig tolerance must be > 0, got {tol}")));
    }
    let scale = a.max_abs().max(1.0);
    let asym = a.asymmetry();
    if asym > 1e-12 * scale {
        return Err(Error::contract(format!(
            "sym_eig input is not symmetric (max |a_ij - a_ji| = {asym:.3e})"
        )));
    }

    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let target = tol * a.frobenius_norm();

    let mut sweeps = 0;
    let mut residual = off_diagonal_norm(&m);
    while residual > target {
        if sweeps == MAX_SWEEPS {
            return Err(Error::Convergence { sweeps, residual });
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                rotate(&mut m, &mut v, p, q);
            }
        }
        sweeps += 1;
        residual = off_diagonal_norm(&m);
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps ascending diagonal index among exact ties.
    order.sort_by(|&i, &j| m.get(j, j).total_cmp(&m.get(i, i)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m.get(i, i)).collect();
    let eigenvectors = v.select_cols(&order);

    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
        sweeps,
        residual,
    })
}

fn off_diagonal_norm(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m.get(i, j) * m.get(i, j);
            }
        }
    }
    s.sqrt()
}

fn rotate(m: &mut Matrix, v: &mut Matrix, p: usize, q: usize) {
    let apq = m.get(p, q);
    if apq == 0.0 {
        return;
    }
    let n = m.rows();
    let app = m.get(p, p);
    let aqq = m.get(q, q);
    let tau = (aqq - app) / (2.0 * apq);
    let t = if tau >= 0.0 {
        1.0 / (tau + (1.0 + tau * tau).sqrt())
    } else {
        -1.0 / (-tau + (1.0 + tau * tau).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;

    for k in 0..n {
        let akp = m.get(k, p);
        let akq = m.get(k, q);
        m.set(k, p, c * akp - s * akq);
        m.set(k, q, s * akp + c * akq);
    }
    for k in 0..n {
        let apk = m.get(p, k);
        let aqk = m.get(q, k);
        m.set(p, k, c * apk - s * aqk);
        m.set(q, k, s * apk + c * aqk);
    }
    m.set(p, q, 0.0);
    m.set(q, p, 0.0);
    for k in 0..n {
        let vkp = v.get(k, p);
        let vkq = v.get(k, q);
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
    cost::add(18 * n as u64);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn diagonal_input() {
        let e = sym_eig(&Matrix::from_diag(&[4.0, 0.0]), DEFAULT_TOL).unwrap();
        assert_eq!(e.eigenvalues, vec![4.0, 0.0]);
        assert_eq!(e.eigenvectors, Matrix::identity(2));
        assert_eq!(e.sweeps, 0);
    }

    #[test]
    fn two_by_two_hand_computed() {
        // λ² - 4λ + 3 = 0  →  λ ∈ {3, 1}
        let a = Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let e = sym_eig(&a, DEFAULT_TOL).unwrap();
        assert_close(e.eigenvalues[0], 3.0, 1e-14);
        assert_close(e.eigenvalues[1], 1.0, 1e-14);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let v0 = e.eigenvectors.col(0);
        let v1 = e.eigenvectors.col(1);
        // eigenvectors are defined up to sign
        assert_close((v0[0] * r + v0[1] * r).abs(), 1.0, 1e-14);
        assert_close((v1[0] * r - v1[1] * r).abs(), 1.0, 1e-14);
    }

    #[test]
    fn identity_any_basis_reconstructs() {
        let a = Matrix::identity(3);
        let e = sym_eig(&a, DEFAULT_TOL).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0, 1.0]);
        let r = e.reconstruct().sub(&a).unwrap().frobenius_norm();
        assert!(r <= 1e-12);
    }

    #[test]
    fn repeated_eigenvalues_keep_diagonal_order() {
        let e = sym_eig(&Matrix::from_diag(&[1.0, 5.0, 1.0]), DEFAULT_TOL).unwrap();
        assert_eq!(e.eigenvalues, vec![5.0, 1.0, 1.0]);
        assert_eq!(e.eigenvectors.col(1), vec![1.0, 0.0, 0.0]);
        assert_eq!(e.eigenvectors.col(2), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_input() {
        let rect = Matrix::zeros(2, 3);
        assert!(matches!(sym_eig(&rect, 1e-12), Err(Error::Contract(_))));
        let asym = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&asym, 1e-12), Err(Error::Contract(_))));
        assert!(sym_eig(&Matrix::identity(2), 0.0).is_err());
    }
}
