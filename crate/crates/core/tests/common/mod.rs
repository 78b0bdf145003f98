//! Independent oracles and fixtures shared by the integration tests.

#![allow(dead_code)]

use grip_core::constraints::{ExpertConstraintSet, IneqRow};
use grip_core::moe::{backward, cross_entropy, forward_pass, ForwardPass, GradSeed, MoENetwork, NetShape};
use grip_core::numerics::{Matrix, Projector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

pub fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Orthonormal columns spanning the columns of `a` (modified Gram-Schmidt,
/// twice for stability). Assumes full column rank.
pub fn orthonormal_columns(a: &Matrix) -> Matrix {
    let mut cols: Vec<Vec<f64>> = (0..a.cols()).map(|j| a.col(j)).collect();
    for j in 0..cols.len() {
        for _ in 0..2 {
            for i in 0..j {
                let p: f64 = cols[i].iter().zip(&cols[j]).map(|(x, y)| x * y).sum();
                let ci = cols[i].clone();
                cols[j].iter_mut().zip(&ci).for_each(|(v, c)| *v -= p * c);
            }
        }
        let n = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        cols[j].iter_mut().for_each(|v| *v /= n);
    }
    Matrix::from_cols(&cols).unwrap()
}

/// Solves `a · x = b` column by column with partially pivoted Gaussian
/// elimination.
pub fn gauss_solve(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.rows();
    assert!(a.is_square() && b.rows() == n);
    let m = b.cols();
    let mut aug: Vec<Vec<f64>> = (0..n)
        .map(|i| a.row(i).iter().chain(b.row(i)).copied().collect())
        .collect();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&x, &y| aug[x][c].abs().total_cmp(&aug[y][c].abs()))
            .unwrap();
        aug.swap(c, p);
        let piv = aug[c][c];
        assert!(piv != 0.0, "singular system");
        for r in 0..n {
            if r != c {
                let f = aug[r][c] / piv;
                if f != 0.0 {
                    for k in c..n + m {
                        aug[r][k] -= f * aug[c][k];
                    }
                }
            }
        }
    }
    let data = (0..n)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| aug[i][n + j] / aug[i][i])
        .collect();
    Matrix::new(n, m, data).unwrap()
}

/// `(XᵀX + λI)⁻¹ Xᵀ`, the push-through form of the ridge pseudo-inverse.
pub fn ridge_oracle(x: &Matrix, lambda: f64) -> Matrix {
    let n = x.cols();
    let mut g = x.transpose().matmul(x).unwrap();
    for i in 0..n {
        g.set(i, i, g.get(i, i) + lambda);
    }
    gauss_solve(&g, &x.transpose())
}

pub fn rel_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE)
}

/// Constraint set with no equality part and the given half-spaces
/// `rowᵀu ≤ margin`.
pub fn halfspace_set(rows: Vec<Vec<f64>>, margins: Vec<f64>) -> ExpertConstraintSet {
    let d = rows[0].len();
    let ineq = rows
        .into_iter()
        .zip(margins)
        .enumerate()
        .map(|(i, (row, margin))| {
            let weight = row.iter().map(|v| v * v).sum();
            IneqRow { index: i, row, margin, weight }
        })
        .collect();
    ExpertConstraintSet {
        layer: 0,
        expert: 0,
        eq_indices: vec![],
        eq_projector: Projector::identity(d),
        ineq,
        empty_nullspace: false,
        dropped_rows: 0,
    }
}

pub fn max_violation(u: &[f64], rows: &[Vec<f64>], bounds: &[f64]) -> f64 {
    rows.iter()
        .zip(bounds)
        .map(|(r, b)| r.iter().zip(u).map(|(x, y)| x * y).sum::<f64>() - b)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Cyclic alternating projections onto `rowᵀu ≤ bound` until the largest
/// violation is below `tol`.
pub fn alternating_projections(start: &[f64], rows: &[Vec<f64>], bounds: &[f64], tol: f64, sweeps: usize) -> Vec<f64> {
    let mut u = start.to_vec();
    for _ in 0..sweeps {
        for (r, &b) in rows.iter().zip(bounds) {
            let v: f64 = r.iter().zip(&u).map(|(x, y)| x * y).sum::<f64>() - b;
            if v > 0.0 {
                let w: f64 = r.iter().map(|x| x * x).sum();
                u.iter_mut().zip(r).for_each(|(ui, ri)| *ui -= v / w * ri);
            }
        }
        if max_violation(&u, rows, bounds) <= tol {
            break;
        }
    }
    u
}

/// Random feasible system: Gaussian normals, margins in `[0.1, 1]` so the
/// origin is strictly inside, and a start point far outside.
pub fn feasible_system(rng: &mut impl Rng, d: usize, m: usize) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let rows: Vec<Vec<f64>> = (0..m).map(|_| gaussian_vec(rng, d)).collect();
    let margins: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
    let start: Vec<f64> = gaussian_vec(rng, d).iter().map(|v| 3.0 * v).collect();
    (rows, margins, start)
}

/// One-sided sign test: probability of at least `wins` successes in
/// `wins + losses` fair coin flips.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let mut c = 1.0f64;
    let mut probs = vec![0.0; n + 1];
    for (k, p) in probs.iter_mut().enumerate() {
        if k > 0 {
            c = c * (n - k + 1) as f64 / k as f64;
        }
        *p = c * 0.5f64.powi(n as i32);
    }
    probs[wins..].iter().sum::<f64>().min(1.0)
}

/// Counts `a > b` and `a < b`; exact ties are dropped.
pub fn sign_counts(pairs: &[(f64, f64)]) -> (usize, usize) {
    let wins = pairs.iter().filter(|(a, b)| a > b).count();
    let losses = pairs.iter().filter(|(a, b)| a < b).count();
    (wins, losses)
}

pub const TINY: NetShape = NetShape { layers: 2, experts: 4, dim: 5, k: 2, classes: 3 };

/// Smallest gap between the k-th and (k+1)-th router score over every layer
/// of every input.
pub fn min_topk_gap(net: &MoENetwork, inputs: &[Vec<f64>]) -> f64 {
    let mut gap = f64::INFINITY;
    for x in inputs {
        let fwd = forward_pass(net, x).unwrap();
        for (l, out) in fwd.layers.iter().enumerate() {
            let mut s = out.scores.clone();
            s.sort_by(|a, b| b.total_cmp(a));
            let k = net.layers[l].k;
            gap = gap.min(s[k - 1] - s[k]);
        }
    }
    gap
}

fn ce_loss(net: &MoENetwork, inputs: &[Vec<f64>], labels: &[usize]) -> f64 {
    inputs
        .iter()
        .zip(labels)
        .map(|(x, &y)| cross_entropy(&forward_pass(net, x).unwrap().logits, y).0)
        .sum()
}

/// Largest relative error between the analytic gradient of summed
/// cross-entropy and central differences, or `None` when a top-k boundary
/// is too close for differences to be meaningful.
pub fn gradient_check(net: &MoENetwork, inputs: &[Vec<f64>], labels: &[usize], h: f64) -> Option<f64> {
    if min_topk_gap(net, inputs) < 1e-3 {
        return None;
    }
    let loss = |i: usize, fwd: &ForwardPass| {
        let (l, g) = cross_entropy(&fwd.logits, labels[i]);
        Ok((l, GradSeed { logits: Some(g), hidden: vec![] }))
    };
    let (_, grads) = backward(net, inputs, &loss).unwrap();
    let analytic = grads.flat();
    let mut numeric = Vec::with_capacity(analytic.len());
    let n = net.num_params();
    for idx in 0..n {
        let eval = |delta: f64| {
            let mut m = net.clone();
            let mut off = 0;
            for sl in m.param_slices_mut() {
                if idx < off + sl.len() {
                    sl[idx - off] += delta;
                    break;
                }
                off += sl.len();
            }
            ce_loss(&m, inputs, labels)
        };
        numeric.push((eval(h) - eval(-h)) / (2.0 * h));
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
    Some(diff / scale)
}

/// A random tiny net and a handful of labelled inputs.
pub fn tiny_problem(seed: u64) -> (MoENetwork, Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng(seed);
    let mut net = MoENetwork::random(TINY, 1.5, &mut r).unwrap();
    for l in &mut net.layers {
        for e in &mut l.experts {
            e.bias = gaussian_vec(&mut r, TINY.dim).iter().map(|v| 0.3 * v).collect();
        }
    }
    let inputs: Vec<Vec<f64>> = (0..4).map(|_| gaussian_vec(&mut r, TINY.dim)).collect();
    let labels = (0..4).map(|_| r.random_range(0..TINY.classes)).collect();
    (net, inputs, labels)
}
