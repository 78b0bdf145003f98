//! Reverse-mode differentiation through the network.
//!
//! The discrete top-k choice is held fixed within a pass; gradients reach
//! the router only through the softmax weights of the selected experts.

use crate::cost;
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, Matrix};

use super::{forward_pass, LayerOutput, LayerTrace, MoENetwork};

/// Intermediates of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardPass {
    /// `hidden[0]` is the input, `hidden[l + 1]` the output of layer `l`.
    pub hidden: Vec<Vec<f64>>,
    pub layers: Vec<LayerOutput>,
    pub logits: Vec<f64>,
}

impl ForwardPass {
    pub fn trace(&self) -> Vec<LayerTrace> {
        self.layers
            .iter()
            .map(|o| LayerTrace {
                selection: o.selection.clone(),
                scores: o.scores.clone(),
            })
            .collect()
    }
}

/// Upstream gradients injected into a backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradSeed {
    /// `∂L/∂logits`.
    pub logits: Option<Vec<f64>>,
    /// `(l, ∂L/∂hidden[l])` pairs.
    pub hidden: Vec<(usize, Vec<f64>)>,
}

/// Per-sample loss with its gradient seed.
pub trait Loss {
    fn sample(&self, index: usize, fwd: &ForwardPass) -> Result<(f64, GradSeed)>;
}

impl<F> Loss for F
where
    F: Fn(usize, &ForwardPass) -> Result<(f64, GradSeed)>,
{
    fn sample(&self, index: usize, fwd: &ForwardPass) -> Result<(f64, GradSeed)> {
        self(index, fwd)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    /// `E × d`.
    pub router: Matrix,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

/// Gradients shaped like a [`MoENetwork`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
    pub readout_weight: Matrix,
    pub readout_bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &MoENetwork) -> Self {
        let d = net.dim;
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    router: Matrix::zeros(l.num_experts(), d),
                    weights: vec![Matrix::zeros(d, d); l.num_experts()],
                    biases: vec![vec![0.0; d]; l.num_experts()],
                })
                .collect(),
            readout_weight: Matrix::zeros(net.num_classes(), d),
            readout_bias: vec![0.0; net.num_classes()],
        }
    }

    /// Flattened in checkpoint parameter order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.router.as_slice());
            for (w, b) in l.weights.iter().zip(&l.biases) {
                out.extend_from_slice(w.as_slice());
                out.extend_from_slice(b);
            }
        }
        out.extend_from_slice(self.readout_weight.as_slice());
        out.extend_from_slice(&self.readout_bias);
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.router.as_mut_slice());
            for (w, b) in l.weights.iter_mut().zip(l.biases.iter_mut()) {
                out.push(w.as_mut_slice());
                out.push(b);
            }
        }
        out.push(self.readout_weight.as_mut_slice());
        out.push(&mut self.readout_bias);
        out
    }

    pub fn scale(&mut self, s: f64) {
        for sl in self.slices_mut() {
            sl.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, s: f64, other: &Gradients) {
        let src = other.flat();
        let mut off = 0;
        for sl in self.slices_mut() {
            axpy(s, &src[off..off + sl.len()], sl);
            off += sl.len();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.flat().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Cross-entropy of `logits` against `label`, with `∂/∂logits`.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut p = softmax(logits);
    let loss = -log_softmax(logits)[label];
    p[label] -= 1.0;
    (loss, p)
}

/// Accumulates the gradient of one sample into `grads`.
pub fn backprop(net: &MoENetwork, fwd: &ForwardPass, seed: &GradSeed, grads: &mut Gradients) {
    let d = net.dim;
    let nl = net.layers.len();
    let hidden_seed = |l: usize, dh: &mut Vec<f64>| {
        for (idx, g) in &seed.hidden {
            if *idx == l {
                axpy(1.0, g, dh);
            }
        }
    };

    let mut dh = vec![0.0; d];
    if let Some(gl) = &seed.logits {
        let h = &fwd.hidden[nl];
        for (c, &g) in gl.iter().enumerate() {
            if g != 0.0 {
                axpy(g, h, grads.readout_weight.row_mut(c));
                grads.readout_bias[c] += g;
                axpy(g, net.readout.weight.row(c), &mut dh);
            }
        }
        cost::add(4 * (gl.len() * d) as u64);
    }
    hidden_seed(nl, &mut dh);

    for l in (0..nl).rev() {
        let layer = &net.layers[l];
        let out = &fwd.layers[l];
        let h = &fwd.hidden[l];
        let lg = &mut grads.layers[l];
        let mut dh_in = dh.clone();

        let dw: Vec<f64> = out.expert_outputs.iter().map(|e| dot(&dh, e)).collect();
        let mean_dw: f64 = out.weights.iter().zip(&dw).map(|(w, g)| w * g).sum();

        for (slot, &j) in out.selection.indices().iter().enumerate() {
            let w = out.weights[slot];
            let wmat = &layer.experts[j].weight;
            let gw = &mut lg.weights[j];
            for r in 0..d {
                let coeff = w * dh[r];
                if coeff != 0.0 {
                    axpy(coeff, h, gw.row_mut(r));
                    axpy(coeff, wmat.row(r), &mut dh_in);
                }
            }
            axpy(w, &dh, &mut lg.biases[j]);

            let ds = w * (dw[slot] - mean_dw);
            if ds != 0.0 {
                axpy(ds, h, lg.router.row_mut(j));
                axpy(ds, layer.router.theta.row(j), &mut dh_in);
            }
        }
        cost::add((out.selection.len() * (4 * d * d + 8 * d)) as u64);
        hidden_seed(l, &mut dh_in);
        dh = dh_in;
    }
}

/// Sums loss and gradients over `inputs`; `loss` decides per-sample scaling.
pub fn backward(
    net: &MoENetwork,
    inputs: &[Vec<f64>],
    loss: &dyn Loss,
) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros_like(net);
    let mut total = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let fwd = forward_pass(net, x)?;
        let (l, seed) = loss.sample(i, &fwd)?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("loss on sample {i}")));
        }
        total += l;
        backprop(net, &fwd, &seed, &mut grads);
    }
    Ok((total, grads))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::moe::{ExpertParams, MoELayer, NetShape, Readout};

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = MoENetwork::random(NetShape::default(), 1.0, &mut rng).unwrap();
        let x: Vec<f64> = (0..32).map(|_| StandardNormal.sample(&mut rng)).collect();
        let loss = |_: usize, fwd: &ForwardPass| {
            Ok((0.0, GradSeed {
                logits: Some(vec![0.0; fwd.logits.len()]),
                hidden: vec![],
            }))
        };
        let (_, g) = backward(&net, &[x], &loss).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    /// Dense limit (k = E, one layer, zero expert weights, bias-only experts):
    /// the router gradient must match the closed-form full-softmax derivative
    /// `∂L/∂Θ_j = p_j (u_j − Σ_k p_k u_k) xᵀ` with `u_j = ∂L/∂y · b_j`.
    #[test]
    fn dense_limit_router_gradient_matches_closed_form() {
        let d = 3;
        let theta = Matrix::from_rows(&[[0.2, -0.1, 0.4], [1.0, 0.3, -0.2], [-0.5, 0.6, 0.1]])
            .unwrap();
        let biases = [[1.0, 0.0, 2.0], [0.0, -1.0, 0.5], [3.0, 1.0, -1.0]];
        let experts: Vec<ExpertParams> = biases
            .iter()
            .map(|b| ExpertParams {
                weight: Matrix::zeros(d, d),
                bias: b.to_vec(),
            })
            .collect();
        let layer = MoELayer::new(theta.clone(), experts, 3).unwrap();
        let readout = Readout {
            weight: Matrix::identity(d),
            bias: vec![0.0; d],
        };
        let net = MoENetwork::new(d, vec![layer], readout).unwrap();
        let x = vec![0.7, -1.2, 0.4];
        let upstream = vec![0.3, -0.8, 1.1];
        let up = upstream.clone();
        let loss = move |_: usize, _: &ForwardPass| {
            Ok((0.0, GradSeed {
                logits: Some(up.clone()),
                hidden: vec![],
            }))
        };
        let (_, g) = backward(&net, std::slice::from_ref(&x), &loss).unwrap();

        let s = theta.matvec(&x).unwrap();
        let p = softmax(&s);
        let u: Vec<f64> = biases.iter().map(|b| dot(&upstream, b)).collect();
        let ubar: f64 = p.iter().zip(&u).map(|(a, b)| a * b).sum();
        for j in 0..3 {
            for c in 0..d {
                let expected = p[j] * (u[j] - ubar) * x[c];
                assert!((g.layers[0].router.get(j, c) - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let (l, g) = cross_entropy(&[1.0, 2.0, 0.5], 1);
        assert!(l > 0.0);
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
        assert!(g[1] < 0.0);
    }
}
