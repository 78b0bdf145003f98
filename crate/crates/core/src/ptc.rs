//! Post-training router correction.
//!
//! After unconstrained unlearning the retain representations drift from
//! `X` to `X′`. Each router is realigned so its scores on `X′` reproduce the
//! cached scores: `ΔΘ = (S − Θ X′) X′†` with the ridge pseudo-inverse
//! `X′† = X′ᵀ(X′X′ᵀ + λI)⁻¹`. When the router itself is unchanged,
//! `S = Θ X` and this is `Θ (X − X′) X′†`.

use serde::{Deserialize, Serialize};

use crate::constraints::RetainCache;
use crate::cost;
use crate::error::{Error, Result};
use crate::moe::{forward_pass, MoENetwork};
use crate::numerics::{ridge_pseudoinverse, Matrix};

pub const DEFAULT_LAMBDA: f64 = 1e-6;

/// Correction of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PtcLayer {
    pub layer: usize,
    #[serde(skip)]
    pub delta: Option<Matrix>,
    pub delta_norm: f64,
    /// `‖(Θ + ΔΘ) X′ − S‖_F`.
    pub residual: f64,
    /// `residual / ‖S‖_F`.
    pub relative_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PtcResult {
    pub layers: Vec<PtcLayer>,
    pub lambda: f64,
    /// Drifted inputs were recaptured after each layer's correction.
    pub sequential: bool,
    /// Floating-point operations spent on the correction, recapture included.
    pub flops: u64,
}

impl PtcResult {
    pub fn max_relative_residual(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.relative_residual)
            .fold(0.0, f64::max)
    }
}

/// Pre-router representations of `inputs` under `net`, one `d × N` matrix
/// per layer, columns in input order.
pub fn recapture_drifted(
    net: &MoENetwork,
    cache: &RetainCache,
    inputs: &[Vec<f64>],
) -> Result<Vec<Matrix>> {
    if inputs.len() != cache.num_inputs() {
        return Err(Error::contract(format!(
            "{} retain inputs for a cache of {}",
            inputs.len(),
            cache.num_inputs()
        )));
    }
    if net.layers.len() != cache.num_layers() {
        return Err(Error::contract("network and cache layer counts differ"));
    }
    let mut out = vec![Matrix::zeros(net.dim, inputs.len()); net.layers.len()];
    for (i, x) in inputs.iter().enumerate() {
        let fwd = forward_pass(net, x)?;
        for (l, m) in out.iter_mut().enumerate() {
            m.set_col(i, &fwd.hidden[l]);
        }
    }
    Ok(out)
}

/// `Θ (X − X′) X′ᵀ (X′X′ᵀ + λI)⁻¹`.
pub fn ptc_correction(theta: &Matrix, x: &Matrix, x_drift: &Matrix, lambda: f64) -> Result<Matrix> {
    if x.shape() != x_drift.shape() {
        return Err(Error::contract(format!(
            "X is {:?}, X′ is {:?}",
            x.shape(),
            x_drift.shape()
        )));
    }
    if theta.cols() != x.rows() {
        return Err(Error::contract(format!(
            "router has {} columns, representations have {} rows",
            theta.cols(),
            x.rows()
        )));
    }
    let target = theta.matmul(x)?;
    score_restoration(theta, &target, x_drift, lambda)
}

/// Ridge least-squares `ΔΘ` minimizing `‖(Θ + ΔΘ) X′ − S‖² + λ‖ΔΘ‖²`.
pub fn score_restoration(
    theta: &Matrix,
    target: &Matrix,
    x_drift: &Matrix,
    lambda: f64,
) -> Result<Matrix> {
    if target.shape() != (theta.rows(), x_drift.cols()) || theta.cols() != x_drift.rows() {
        return Err(Error::contract(format!(
            "router {:?}, target scores {:?}, drifted inputs {:?} do not conform",
            theta.shape(),
            target.shape(),
            x_drift.shape()
        )));
    }
    let gap = target.sub(&theta.matmul(x_drift)?)?;
    let pinv = ridge_pseudoinverse(x_drift, lambda)?;
    gap.matmul(&pinv)
}

fn restoration_residual(theta: &Matrix, target: &Matrix, x_drift: &Matrix) -> Result<(f64, f64)> {
    let r = theta.matmul(x_drift)?.sub(target)?.frobenius_norm();
    let scale = target.frobenius_norm();
    Ok((r, if scale > 0.0 { r / scale } else { r }))
}

/// Corrects every router of `net` against the cached retain scores.
///
/// Sequential mode walks layers in order and recaptures `X′` after each
/// correction, since a corrected router changes expert mixing and therefore
/// every later layer's input. One-shot mode captures `X′` once.
pub fn apply_ptc(
    net: &MoENetwork,
    cache: &RetainCache,
    inputs: &[Vec<f64>],
    lambda: f64,
    sequential: bool,
) -> Result<(MoENetwork, PtcResult)> {
    if !(lambda > 0.0) {
        return Err(Error::contract(format!("lambda must be > 0, got {lambda}")));
    }
    let mut out = net.clone();
    let (layers, flops) = cost::measure(|| -> Result<Vec<PtcLayer>> {
        let mut layers = Vec::with_capacity(out.layers.len());
        let mut drift = recapture_drifted(&out, cache, inputs)?;
        for l in 0..out.layers.len() {
            if sequential && l > 0 {
                drift = recapture_drifted(&out, cache, inputs)?;
            }
            let target = &cache.layers[l].scores;
            let theta = &out.layers[l].router.theta;
            let delta = score_restoration(theta, target, &drift[l], lambda)?;
            let corrected = theta.add(&delta)?;
            let (residual, relative_residual) = restoration_residual(&corrected, target, &drift[l])?;
            out.layers[l].router.theta = corrected;
            layers.push(PtcLayer {
                layer: l,
                delta_norm: delta.frobenius_norm(),
                delta: Some(delta),
                residual,
                relative_residual,
            });
        }
        Ok(layers)
    });
    let layers = layers?;
    if !out.is_finite() {
        return Err(Error::NonFinite("router after correction".into()));
    }
    Ok((
        out,
        PtcResult {
            layers,
            lambda,
            sequential,
            flops,
        },
    ))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::constraints::capture_retain_cache;
    use crate::moe::NetShape;

    #[test]
    fn no_drift_gives_zero_correction() {
        let theta = Matrix::from_rows(&[[1.0, 2.0], [3.0, -1.0]]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 0.5], [0.0, 2.0]]).unwrap();
        let d = ptc_correction(&theta, &x, &x, 1e-6).unwrap();
        assert!(d.frobenius_norm() <= 1e-9 * theta.frobenius_norm());
    }

    #[test]
    fn axis_swap_hand_computed() {
        let lambda = 1e-6;
        let theta = Matrix::identity(2);
        let x = Matrix::from_cols(&[[1.0, 0.0]]).unwrap();
        let xd = Matrix::from_cols(&[[0.0, 1.0]]).unwrap();
        let d = ptc_correction(&theta, &x, &xd, lambda).unwrap();
        let s = 1.0 / (1.0 + lambda);
        let want = [[0.0, s], [0.0, -s]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((d.get(i, j) - want[i][j]).abs() < 1e-15);
            }
        }
        let restored = theta.add(&d).unwrap().matvec(&[0.0, 1.0]).unwrap();
        assert!((restored[0] - 1.0).abs() < 1e-5 && restored[1].abs() < 1e-5);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let theta = Matrix::identity(2);
        let x = Matrix::zeros(2, 3);
        assert!(ptc_correction(&theta, &x, &Matrix::zeros(2, 2), 1e-6).is_err());
        assert!(ptc_correction(&Matrix::identity(3), &x, &x, 1e-6).is_err());
    }

    #[test]
    fn unchanged_network_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = NetShape {
            layers: 2,
            experts: 4,
            dim: 8,
            k: 2,
            classes: 3,
        };
        let net = MoENetwork::random(shape, 1.0, &mut rng).unwrap();
        let inputs: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..8).map(|j| ((i * 8 + j) as f64 * 0.37).sin()).collect())
            .collect();
        let ids: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let cache = capture_retain_cache(&net, &ids, &inputs).unwrap();
        let drift = recapture_drifted(&net, &cache, &inputs).unwrap();
        for (a, b) in drift.iter().zip(&cache.layers) {
            assert_eq!(a, &b.x);
        }
        let (fixed, res) = apply_ptc(&net, &cache, &inputs, 1e-6, true).unwrap();
        assert_eq!(res.layers.len(), 2);
        for l in &res.layers {
            assert!(l.delta_norm < 1e-9, "{}", l.delta_norm);
        }
        assert!(fixed.flat_params().iter().zip(net.flat_params()).all(|(a, b)| (a - b).abs() < 1e-9));
        assert!(recapture_drifted(&net, &cache, &inputs[..3]).is_err());
    }
}
