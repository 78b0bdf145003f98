//! Minimal differentiable mixture-of-experts network.
//!
//! Each layer scores experts with a linear router `s = Θ x`, keeps the top-k
//! (ties go to the lower index), and mixes the selected affine experts with
//! a softmax over the selected scores only. Layers are wrapped in a residual
//! connection and followed by a linear readout to class logits.

mod backward;
mod checkpoint;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, Matrix};

pub use backward::{
    backward, cross_entropy, log_softmax, softmax, ForwardPass, GradSeed, Gradients, LayerGrads,
    Loss,
};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

/// Router weights, one row per expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterParams {
    /// `E × d`.
    pub theta: Matrix,
}

/// Affine expert map `x ↦ W x + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl ExpertParams {
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.weight.matvec(x)?;
        axpy(1.0, &self.bias, &mut y);
        Ok(y)
    }

    pub fn identity(d: usize) -> Self {
        Self {
            weight: Matrix::identity(d),
            bias: vec![0.0; d],
        }
    }

    pub fn zero(d: usize) -> Self {
        Self {
            weight: Matrix::zeros(d, d),
            bias: vec![0.0; d],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoELayer {
    pub router: RouterParams,
    pub experts: Vec<ExpertParams>,
    pub k: usize,
}

impl MoELayer {
    pub fn new(router: Matrix, experts: Vec<ExpertParams>, k: usize) -> Result<Self> {
        let (e, d) = router.shape();
        if e < 2 {
            return Err(Error::contract(format!("a layer needs at least 2 experts, got {e}")));
        }
        if experts.len() != e {
            return Err(Error::contract(format!(
                "router has {e} rows but {} experts were given",
                experts.len()
            )));
        }
        if k == 0 || k > e {
            return Err(Error::contract(format!("top-k must satisfy 1 <= k <= {e}, got {k}")));
        }
        for (j, ex) in experts.iter().enumerate() {
            if ex.weight.shape() != (d, d) || ex.bias.len() != d {
                return Err(Error::contract(format!("expert {j} is not a {d}-dimensional map")));
            }
        }
        Ok(Self {
            router: RouterParams { theta: router },
            experts,
            k,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn dim(&self) -> usize {
        self.router.theta.cols()
    }
}

/// Linear head to class logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    /// `C × d`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Readout {
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.weight.matvec(x)?;
        axpy(1.0, &self.bias, &mut y);
        Ok(y)
    }
}

/// Size parameters of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetShape {
    pub layers: usize,
    pub experts: usize,
    pub dim: usize,
    pub k: usize,
    pub classes: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            layers: 4,
            experts: 8,
            dim: 32,
            k: 2,
            classes: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoENetwork {
    pub dim: usize,
    pub layers: Vec<MoELayer>,
    pub readout: Readout,
}

impl MoENetwork {
    pub fn new(dim: usize, layers: Vec<MoELayer>, readout: Readout) -> Result<Self> {
        for (l, layer) in layers.iter().enumerate() {
            if layer.dim() != dim {
                return Err(Error::contract(format!(
                    "layer {l} has width {}, network width is {dim}",
                    layer.dim()
                )));
            }
        }
        if readout.weight.cols() != dim || readout.bias.len() != readout.weight.rows() {
            return Err(Error::contract("readout shape does not match network width"));
        }
        Ok(Self {
            dim,
            layers,
            readout,
        })
    }

    /// Random initialization: routers `N(0, router_scale²/d)`, experts
    /// `N(0, 1/d)` weights with zero bias, readout `N(0, 1/d)`.
    pub fn random(shape: NetShape, router_scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let d = shape.dim;
        let std = 1.0 / (d as f64).sqrt();
        let gauss = |rng: &mut dyn rand::RngCore, rows: usize, cols: usize, s: f64| {
            let n = Normal::new(0.0, s).expect("valid std");
            let data = (0..rows * cols).map(|_| n.sample(rng)).collect();
            Matrix::new(rows, cols, data)
        };
        let mut layers = Vec::with_capacity(shape.layers);
        for _ in 0..shape.layers {
            let router = gauss(rng, shape.experts, d, router_scale * std)?;
            let experts = (0..shape.experts)
                .map(|_| {
                    Ok(ExpertParams {
                        weight: gauss(rng, d, d, std)?,
                        bias: vec![0.0; d],
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            layers.push(MoELayer::new(router, experts, shape.k)?);
        }
        let readout = Readout {
            weight: gauss(rng, shape.classes, d, std)?,
            bias: vec![0.0; shape.classes],
        };
        Self::new(d, layers, readout)
    }

    pub fn shape(&self) -> NetShape {
        NetShape {
            layers: self.layers.len(),
            experts: self.layers.first().map_or(0, MoELayer::num_experts),
            dim: self.dim,
            k: self.layers.first().map_or(0, |l| l.k),
            classes: self.readout.weight.rows(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.readout.weight.rows()
    }

    /// Every parameter in checkpoint order: per layer the router (row-major),
    /// then each expert's weight and bias; finally the readout weight and bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(layer.router.theta.as_slice());
            for ex in &layer.experts {
                out.extend_from_slice(ex.weight.as_slice());
                out.extend_from_slice(&ex.bias);
            }
        }
        out.extend_from_slice(self.readout.weight.as_slice());
        out.extend_from_slice(&self.readout.bias);
        out
    }

    /// Mutable views of every parameter slice, in [`Self::flat_params`] order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            out.push(layer.router.theta.as_mut_slice());
            for ex in &mut layer.experts {
                out.push(ex.weight.as_mut_slice());
                out.push(&mut ex.bias);
            }
        }
        out.push(self.readout.weight.as_mut_slice());
        out.push(&mut self.readout.bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.flat_params().len()
    }

    pub fn is_finite(&self) -> bool {
        self.flat_params().iter().all(|v| v.is_finite())
    }
}

/// Sorted set of selected expert indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SelectionSet(Vec<usize>);

impl SelectionSet {
    /// Sorts and deduplicates `indices`.
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self(indices)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.0.binary_search(&j).is_ok()
    }

    pub fn intersection_len(&self, other: &SelectionSet) -> usize {
        self.0.iter().filter(|j| other.contains(**j)).count()
    }
}

/// `s = Θ x`.
pub fn route_scores(layer: &MoELayer, x: &[f64]) -> Result<Vec<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("router input".into()));
    }
    layer.router.theta.matvec(x)
}

/// Indices of the `k` largest scores, ties broken toward the lower index.
pub fn topk_select(scores: &[f64], k: usize) -> Result<SelectionSet> {
    let e = scores.len();
    if k == 0 || k > e {
        return Err(Error::contract(format!("top-k must satisfy 1 <= k <= {e}, got {k}")));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("router scores".into()));
    }
    let mut order: Vec<usize> = (0..e).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(SelectionSet::new(order))
}

/// Softmax weights over the selected scores only, in selection order.
pub fn selection_weights(scores: &[f64], selection: &SelectionSet) -> Vec<f64> {
    let sel: Vec<f64> = selection.indices().iter().map(|&j| scores[j]).collect();
    softmax(&sel)
}

/// Output of one MoE layer (without the residual path).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutput {
    pub y: Vec<f64>,
    pub selection: SelectionSet,
    pub scores: Vec<f64>,
    /// Softmax weights aligned with `selection.indices()`.
    pub weights: Vec<f64>,
    /// Expert outputs aligned with `selection.indices()`.
    pub expert_outputs: Vec<Vec<f64>>,
}

/// `y = Σ_{j∈S} softmax_S(s)_j · expert_j(x)` with `S` the top-k of `s = Θx`.
pub fn moe_forward(layer: &MoELayer, x: &[f64]) -> Result<LayerOutput> {
    moe_forward_with(layer, x, topk_select)
}

/// As [`moe_forward`], but the selection is chosen by `select(scores, k)`.
pub fn moe_forward_with(
    layer: &MoELayer,
    x: &[f64],
    select: impl FnOnce(&[f64], usize) -> Result<SelectionSet>,
) -> Result<LayerOutput> {
    if x.len() != layer.dim() {
        return Err(Error::contract(format!(
            "layer input has {} entries, expected {}",
            x.len(),
            layer.dim()
        )));
    }
    let scores = route_scores(layer, x)?;
    let selection = select(&scores, layer.k)?;
    if selection.is_empty() || selection.indices().iter().any(|&j| j >= layer.num_experts()) {
        return Err(Error::contract(format!(
            "selection {:?} invalid for {} experts",
            selection.indices(),
            layer.num_experts()
        )));
    }
    let weights = selection_weights(&scores, &selection);
    let mut y = vec![0.0; layer.dim()];
    let mut expert_outputs = Vec::with_capacity(selection.len());
    for (&j, &w) in selection.indices().iter().zip(&weights) {
        let e = layer.experts[j].apply(x)?;
        axpy(w, &e, &mut y);
        expert_outputs.push(e);
    }
    Ok(LayerOutput {
        y,
        selection,
        scores,
        weights,
        expert_outputs,
    })
}

/// Routing record for one layer of one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub selection: SelectionSet,
    pub scores: Vec<f64>,
}

/// Forward pass with routing override: `select(layer, scores, k)` picks the
/// experts at each layer.
pub fn network_forward_with(
    net: &MoENetwork,
    x: &[f64],
    mut select: impl FnMut(usize, &[f64], usize) -> Result<SelectionSet>,
) -> Result<ForwardPass> {
    if x.len() != net.dim {
        return Err(Error::contract(format!(
            "network input has {} entries, expected {}",
            x.len(),
            net.dim
        )));
    }
    let mut h = x.to_vec();
    let mut hidden = vec![h.clone()];
    let mut layers = Vec::with_capacity(net.layers.len());
    for (l, layer) in net.layers.iter().enumerate() {
        let out = moe_forward_with(layer, &h, |s, k| select(l, s, k))?;
        axpy(1.0, &out.y, &mut h);
        hidden.push(h.clone());
        layers.push(out);
    }
    let logits = net.readout.apply(&h)?;
    Ok(ForwardPass {
        hidden,
        layers,
        logits,
    })
}

/// Residual composition `x ← x + moe(x)` per layer, then the readout.
pub fn network_forward(net: &MoENetwork, x: &[f64]) -> Result<(Vec<f64>, Vec<LayerTrace>)> {
    let fwd = forward_pass(net, x)?;
    let trace = fwd.trace();
    Ok((fwd.logits, trace))
}

/// Full forward pass retaining every intermediate needed for backward.
pub fn forward_pass(net: &MoENetwork, x: &[f64]) -> Result<ForwardPass> {
    network_forward_with(net, x, |_, s, k| topk_select(s, k))
}

/// Index of the largest logit (lowest index on ties).
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of inputs whose argmax logit equals the label.
pub fn accuracy(net: &MoENetwork, inputs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if inputs.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (x, &y) in inputs.iter().zip(labels) {
        let (logits, _) = network_forward(net, x)?;
        if argmax(&logits) == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / inputs.len() as f64)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn layer_with(theta: Matrix, experts: Vec<ExpertParams>, k: usize) -> MoELayer {
        MoELayer::new(theta, experts, k).unwrap()
    }

    #[test]
    fn route_scores_examples() {
        let id = layer_with(Matrix::identity(2), vec![ExpertParams::zero(2); 2], 1);
        assert_eq!(route_scores(&id, &[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(route_scores(&id, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let theta = Matrix::from_rows(&[[1.0, 1.0], [1.0, -1.0]]).unwrap();
        let l = layer_with(theta, vec![ExpertParams::zero(2); 2], 1);
        assert_eq!(route_scores(&l, &[2.0, 1.0]).unwrap(), vec![3.0, 1.0]);
        assert!(route_scores(&l, &[1.0]).is_err());
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_select(&[3.0, 2.0, 1.0, 0.0], 2).unwrap().indices(), &[0, 1]);
        assert_eq!(topk_select(&[1.0, 1.0, 0.0], 1).unwrap().indices(), &[0]);
        assert_eq!(topk_select(&[0.1, 0.9, 0.5, 0.9], 2).unwrap().indices(), &[1, 3]);
        assert!(topk_select(&[1.0, 2.0], 0).is_err());
        assert!(topk_select(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn identical_identity_experts_reproduce_input() {
        let theta = Matrix::from_rows(&[[0.3, -1.0], [2.0, 0.5], [0.0, 1.0]]).unwrap();
        let l = layer_with(theta, vec![ExpertParams::identity(2); 3], 2);
        let out = moe_forward(&l, &[0.7, -1.3]).unwrap();
        assert!((out.y[0] - 0.7).abs() < 1e-15 && (out.y[1] + 1.3).abs() < 1e-15);
    }

    #[test]
    fn softmax_over_selected_pair() {
        // selected scores (ln 2, 0): weights 2/3 and 1/3
        let theta = Matrix::from_rows(&[[std::f64::consts::LN_2], [0.0], [-5.0]]).unwrap();
        let u = ExpertParams {
            weight: Matrix::zeros(1, 1),
            bias: vec![3.0],
        };
        let v = ExpertParams {
            weight: Matrix::zeros(1, 1),
            bias: vec![-6.0],
        };
        let l = layer_with(theta, vec![u, v, ExpertParams::zero(1)], 2);
        let out = moe_forward(&l, &[1.0]).unwrap();
        assert_eq!(out.selection.indices(), &[0, 1]);
        assert!((out.weights[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((out.y[0] - (2.0 / 3.0 * 3.0 + 1.0 / 3.0 * -6.0)).abs() < 1e-14);
    }

    #[test]
    fn k1_uses_argmax_expert_only() {
        let theta = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let e0 = ExpertParams {
            weight: Matrix::from_rows(&[[2.0, 0.0], [0.0, 2.0]]).unwrap(),
            bias: vec![1.0, 1.0],
        };
        let l = layer_with(theta, vec![e0.clone(), ExpertParams::zero(2)], 1);
        let out = moe_forward(&l, &[3.0, 1.0]).unwrap();
        assert_eq!(out.y, e0.apply(&[3.0, 1.0]).unwrap());
    }

    #[test]
    fn empty_network_is_readout() {
        let readout = Readout {
            weight: Matrix::from_rows(&[[1.0, 2.0], [0.0, -1.0], [1.0, 1.0]]).unwrap(),
            bias: vec![0.5, 0.0, -0.5],
        };
        let net = MoENetwork::new(2, vec![], readout.clone()).unwrap();
        let (logits, trace) = network_forward(&net, &[1.0, 1.0]).unwrap();
        assert_eq!(logits, readout.apply(&[1.0, 1.0]).unwrap());
        assert!(trace.is_empty());
    }

    #[test]
    fn residual_path_only() {
        let layer = layer_with(Matrix::identity(3), vec![ExpertParams::zero(3); 3], 2);
        let readout = Readout {
            weight: Matrix::identity(3),
            bias: vec![0.0; 3],
        };
        let net = MoENetwork::new(3, vec![layer], readout).unwrap();
        let (logits, trace) = network_forward(&net, &[0.25, -2.0, 1.0]).unwrap();
        assert_eq!(logits, vec![0.25, -2.0, 1.0]);
        assert_eq!(trace[0].selection.indices(), &[0, 2]);
    }

    #[test]
    fn seeded_network_trace_is_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            MoENetwork::random(NetShape::default(), 1.0, &mut rng).unwrap()
        };
        let (a, b) = (build(), build());
        let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let (la, ta) = network_forward(&a, &x).unwrap();
        let (lb, tb) = network_forward(&b, &x).unwrap();
        assert_eq!(ta, tb);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&la), bits(&lb));
    }
}
