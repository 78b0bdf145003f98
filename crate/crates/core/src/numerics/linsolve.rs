use crate::cost;
use crate::error::{Error, Result};

use super::Matrix;

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn factor(a: &Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::contract(format!(
                "Cholesky needs a square matrix, got {:?}",
                a.shape()
            )));
        }
        let n = a.rows();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l.get(j, k) * l.get(j, k);
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Numerical {
                    message: format!("matrix not positive definite at pivot {j} (value {d:.3e})"),
                    condition: diag_condition(a),
                });
            }
            let djj = d.sqrt();
            l.set(j, j, djj);
            for i in (j + 1)..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, s / djj);
            }
        }
        cost::add((n * n * n / 3) as u64);
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// Squared ratio of the largest to smallest pivot; a cheap lower bound
    /// on the 2-norm condition number.
    pub fn condition_estimate(&self) -> f64 {
        let n = self.dim();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            lo = lo.min(self.l.get(i, i));
            hi = hi.max(self.l.get(i, i));
        }
        if n == 0 {
            1.0
        } else {
            (hi / lo).powi(2)
        }
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        debug_assert_eq!(b.len(), n);
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l.get(i, k) * b[k];
            }
            b[i] = s / self.l.get(i, i);
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l.get(k, i) * b[k];
            }
            b[i] = s / self.l.get(i, i);
        }
        cost::add(2 * (n * n) as u64);
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &Matrix) -> Result<Matrix> {
        if b.rows() != self.dim() {
            return Err(Error::contract(format!(
                "Cholesky solve: rhs has {} rows, factor is {}",
                b.rows(),
                self.dim()
            )));
        }
        let mut out = Matrix::zeros(b.rows(), b.cols());
        let mut col = vec![0.0; b.rows()];
        for j in 0..b.cols() {
            for (i, c) in col.iter_mut().enumerate() {
                *c = b.get(i, j);
            }
            self.solve_in_place(&mut col);
            out.set_col(j, &col);
        }
        Ok(out)
    }
}

fn diag_condition(a: &Matrix) -> f64 {
    let n = a.rows();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..n {
        let v = a.get(i, i).abs();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Ridge-regularized pseudo-inverse `Xᵀ(XXᵀ + λI)⁻¹` of a `d×N` matrix.
///
/// Uses the push-through identity `Xᵀ(XXᵀ + λI_d)⁻¹ = (XᵀX + λI_N)⁻¹Xᵀ` to
/// factor whichever Gram matrix is smaller, so the SPD system has size
/// `min(d, N)`.
pub fn ridge_pseudoinverse(x: &Matrix, lambda: f64) -> Result<Matrix> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::contract(format!(
            "ridge_pseudoinverse needs lambda > 0, got {lambda}"
        )));
    }
    let (d, n) = x.shape();
    let out = if n <= d {
        let mut g = x.gram_cols();
        for i in 0..n {
            g.set(i, i, g.get(i, i) + lambda);
        }
        let chol = Cholesky::factor(&g)?;
        chol.solve_matrix(&x.transpose())?
    } else {
        let mut g = x.gram_rows();
        for i in 0..d {
            g.set(i, i, g.get(i, i) + lambda);
        }
        let chol = Cholesky::factor(&g)?;
        chol.solve_matrix(x)?.transpose()
    };
    if out.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            message: "pseudo-inverse produced non-finite entries".into(),
            condition: f64::INFINITY,
        });
    }
    Ok(out)
}
