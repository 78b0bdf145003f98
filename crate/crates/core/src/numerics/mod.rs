//! Dense linear algebra: symmetric eigendecomposition (cyclic Jacobi),
//! Cholesky-based ridge pseudo-inverse, and orthogonal projectors.

mod eigen;
mod linsolve;
mod matrix;
mod projector;

pub use eigen::{sym_eig, EigenDecomposition, DEFAULT_TOL as EIG_TOL, MAX_SWEEPS};
pub use linsolve::{ridge_pseudoinverse, Cholesky};
pub use matrix::{axpy, dot, norm, norm_sq, Matrix};
pub use projector::{nullspace_projector, nullspace_projector_scaled, nullspace_with_spectrum, Projector};
