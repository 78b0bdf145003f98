mod common;

use common::*;
use grip_core::numerics::{nullspace_projector, nullspace_projector_scaled, nullspace_with_spectrum, ridge_pseudoinverse, sym_eig, Matrix, EIG_TOL};
use grip_core::Error;
use proptest::prelude::*;

#[test]
fn eigen_hand_examples() {
    let e = sym_eig(&Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap(), EIG_TOL).unwrap();
    assert!((e.eigenvalues[0] - 3.0).abs() < 1e-12 && (e.eigenvalues[1] - 1.0).abs() < 1e-12);
    let v0 = e.eigenvectors.col(0);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    assert!((v0[0].abs() - s).abs() < 1e-12 && (v0[0] - v0[1]).abs() < 1e-12);

    let e = sym_eig(&Matrix::from_diag(&[4.0, 0.0]), EIG_TOL).unwrap();
    assert_eq!(e.eigenvalues, vec![4.0, 0.0]);
    assert_eq!(e.eigenvectors.col(0)[0].abs(), 1.0);

    let e = sym_eig(&Matrix::identity(3), EIG_TOL).unwrap();
    assert!(rel_diff(&e.reconstruct(), &Matrix::identity(3)) < 1e-14);
}

#[test]
fn eigen_rejects_bad_input() {
    let a = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).unwrap();
    assert!(matches!(sym_eig(&a, EIG_TOL), Err(Error::Contract(_))));
    assert!(matches!(sym_eig(&Matrix::zeros(2, 3), EIG_TOL), Err(Error::Contract(_))));
}

#[test]
fn ridge_hand_examples() {
    let x = Matrix::from_cols(&[[0.0, 1.0]]).unwrap();
    let p = ridge_pseudoinverse(&x, 1e-6).unwrap();
    assert_eq!(p.shape(), (1, 2));
    assert_eq!(p.get(0, 0), 0.0);
    assert!((p.get(0, 1) - 1.0 / (1.0 + 1e-6)).abs() < 1e-15);
    let z = ridge_pseudoinverse(&Matrix::zeros(3, 2), 1.0).unwrap();
    assert_eq!(z.max_abs(), 0.0);
    assert!(ridge_pseudoinverse(&x, 0.0).is_err());
}

#[test]
fn projector_of_axis_data() {
    // Data along e1 in R³ leaves e2, e3 as the null space.
    let x = Matrix::from_cols(&[[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
    let p = nullspace_projector(&x, 1e-2).unwrap();
    assert_eq!(p.dimension(), 2);
    let v = p.apply(&[3.0, 4.0, 5.0]);
    assert!(v[0].abs() < 1e-14 && (v[1] - 4.0).abs() < 1e-14 && (v[2] - 5.0).abs() < 1e-14);
    let (p0, spectrum) = nullspace_with_spectrum(&Matrix::zeros(3, 4), 1e-2).unwrap();
    assert!(p0.is_identity() && spectrum.iter().all(|&l| l == 0.0));
}

#[test]
fn relative_threshold_scales_with_the_spectrum() {
    // XXᵀ = diag(100, 0.5, 0): raw 1e-2 keeps one direction, relative 1e-2
    // (threshold 1) keeps two, and scaling X leaves the relative result alone.
    let x = Matrix::from_cols(&[[10.0, 0.0, 0.0], [0.0, 0.5f64.sqrt(), 0.0]]).unwrap();
    assert_eq!(nullspace_projector_scaled(&x, 1e-2, false).unwrap().dimension(), 1);
    assert_eq!(nullspace_projector_scaled(&x, 1e-2, true).unwrap().dimension(), 2);
    assert_eq!(nullspace_projector_scaled(&x.scale(1e3), 1e-2, true).unwrap().dimension(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn eigen_reconstructs_and_is_orthonormal(seed in 0u64..10_000, d in 1usize..24) {
        let a = gaussian(&mut rng(seed), d, d);
        let s = a.add(&a.transpose()).unwrap();
        let e = sym_eig(&s, EIG_TOL).unwrap();
        prop_assert!(rel_diff(&e.reconstruct(), &s) < 1e-9);
        let vtv = e.eigenvectors.transpose().matmul(&e.eigenvectors).unwrap();
        prop_assert!(rel_diff(&vtv, &Matrix::identity(d)) < 1e-10);
        prop_assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn ridge_matches_push_through_oracle(seed in 0u64..10_000, d in 1usize..16, n in 1usize..24, logl in -4.0f64..1.0) {
        let x = gaussian(&mut rng(seed), d, n);
        let lambda = 10f64.powf(logl);
        prop_assert!(rel_diff(&ridge_pseudoinverse(&x, lambda).unwrap(), &ridge_oracle(&x, lambda)) < 1e-8);
    }

    #[test]
    fn projector_is_symmetric_idempotent_and_annihilates(seed in 0u64..10_000, d in 2usize..40, rank_frac in 0.1f64..0.9) {
        let mut r = rng(seed);
        let rank = ((d as f64 * rank_frac) as usize).max(1);
        let u = orthonormal_columns(&gaussian(&mut r, d, rank));
        let x = u.matmul(&gaussian(&mut r, rank, 3 * rank + 4)).unwrap();
        let p = nullspace_projector(&x, 1e-2).unwrap();
        let m = p.matrix();
        prop_assert_eq!(p.dimension(), d - rank);
        prop_assert!(m.matmul(&m).unwrap().sub(&m).unwrap().frobenius_norm() < 1e-9);
        prop_assert!(m.sub(&m.transpose()).unwrap().frobenius_norm() <= 1e-12);
        prop_assert!(m.matmul(&x).unwrap().frobenius_norm() <= 1e-6 * x.frobenius_norm());
    }

    #[test]
    fn larger_threshold_never_shrinks_null_space(seed in 0u64..10_000, d in 2usize..24, n in 1usize..40) {
        let x = gaussian(&mut rng(seed), d, n);
        let small = nullspace_projector(&x, 1e-3).unwrap().dimension();
        let large = nullspace_projector(&x, 1e-1).unwrap().dimension();
        prop_assert!(large >= small);
    }
}
