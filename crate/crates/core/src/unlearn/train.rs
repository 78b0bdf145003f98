//! Optimizers and pretraining of the reference network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{
    accuracy, backward, cross_entropy, forward_pass, log_softmax, ForwardPass, GradSeed, Gradients,
    MoENetwork, NetShape,
};

use super::task::{Split, SyntheticTask};

/// Adam over every parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut MoENetwork, grads: &Gradients) {
        self.t += 1;
        let g = grads.flat();
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut i = 0;
        for sl in net.param_slices_mut() {
            for p in sl.iter_mut() {
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *p -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
                i += 1;
            }
        }
    }
}

/// Which parameter groups an unlearning step may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub routers: bool,
    pub experts: bool,
    pub readout: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Self {
            routers: true,
            experts: true,
            readout: true,
        }
    }
}

/// Plain gradient descent on routers, heavy-ball momentum on experts and
/// readout. Router rows are constrained on the raw gradient, so they never
/// pass through a moment buffer.
#[derive(Clone, Debug)]
pub struct SplitOptimizer {
    pub lr: f64,
    pub router_lr: f64,
    pub momentum: f64,
    pub trainable: Trainable,
    velocity: Vec<f64>,
}

impl SplitOptimizer {
    pub fn new(lr: f64, momentum: f64, trainable: Trainable, num_params: usize) -> Self {
        Self {
            lr,
            router_lr: lr,
            momentum,
            trainable,
            velocity: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, net: &mut MoENetwork, grads: &Gradients) {
        let e = net.shape().experts;
        let g = grads.flat();
        let mut off = 0;
        let slices = net.param_slices_mut();
        let n_slices = slices.len();
        for (s, sl) in slices.into_iter().enumerate() {
            let is_readout = s + 2 >= n_slices;
            let is_router = !is_readout && s % (1 + 2 * e) == 0;
            let on = if is_router {
                self.trainable.routers
            } else if is_readout {
                self.trainable.readout
            } else {
                self.trainable.experts
            };
            for (k, p) in sl.iter_mut().enumerate() {
                let i = off + k;
                if !on {
                    continue;
                }
                if is_router {
                    *p -= self.router_lr * g[i];
                } else {
                    self.velocity[i] = self.momentum * self.velocity[i] + g[i];
                    *p -= self.lr * self.velocity[i];
                }
            }
            off += sl.len();
        }
    }
}

/// Zeroes the gradient groups that are not trainable.
pub fn mask_gradients(grads: &mut Gradients, trainable: Trainable) {
    for l in &mut grads.layers {
        if !trainable.routers {
            l.router.as_mut_slice().fill(0.0);
        }
        if !trainable.experts {
            l.weights.iter_mut().for_each(|w| w.as_mut_slice().fill(0.0));
            l.biases.iter_mut().for_each(|b| b.fill(0.0));
        }
    }
    if !trainable.readout {
        grads.readout_weight.as_mut_slice().fill(0.0);
        grads.readout_bias.fill(0.0);
    }
}

/// Mean cross-entropy over `split` against targets smoothed by `smoothing`
/// (mass spread uniformly over all classes), with its gradient.
pub fn mean_cross_entropy(net: &MoENetwork, split: &Split, smoothing: f64) -> Result<(f64, Gradients)> {
    let n = split.len() as f64;
    let c = net.num_classes() as f64;
    let loss = |i: usize, fwd: &ForwardPass| {
        if smoothing == 0.0 {
            let (l, mut g) = cross_entropy(&fwd.logits, split.labels[i]);
            g.iter_mut().for_each(|v| *v /= n);
            return Ok((l / n, GradSeed { logits: Some(g), hidden: vec![] }));
        }
        let lp = log_softmax(&fwd.logits);
        let y = split.labels[i];
        let target = |k: usize| smoothing / c + if k == y { 1.0 - smoothing } else { 0.0 };
        let l: f64 = -lp.iter().enumerate().map(|(k, v)| target(k) * v).sum::<f64>();
        let g: Vec<f64> = lp.iter().enumerate().map(|(k, v)| (v.exp() - target(k)) / n).collect();
        Ok((l / n, GradSeed { logits: Some(g), hidden: vec![] }))
    };
    backward(net, &split.inputs, &loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Standard deviation multiplier for router initialization.
    pub router_scale: f64,
    pub min_accuracy: f64,
    /// Required forget/retain selection-frequency ratio for at least one
    /// expert.
    pub min_specialization: f64,
    /// Probability mass moved from the label to the uniform distribution.
    pub label_smoothing: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            lr: 5e-3,
            label_smoothing: 0.1,
            router_scale: 1.0,
            min_accuracy: 0.95,
            min_specialization: 2.0,
        }
    }
}

/// Selection frequencies of one expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertCensus {
    pub layer: usize,
    pub expert: usize,
    pub retain_freq: f64,
    pub forget_freq: f64,
    /// `forget_freq / max(retain_freq, 1/N_retain)`.
    pub ratio: f64,
}

/// Per `(layer, expert)` selection frequencies on retain and forget inputs.
pub fn selection_census(net: &MoENetwork, retain: &Split, forget: &Split) -> Result<Vec<ExpertCensus>> {
    let shape = net.shape();
    let count = |split: &Split| -> Result<Vec<Vec<f64>>> {
        let mut c = vec![vec![0.0; shape.experts]; shape.layers];
        for x in &split.inputs {
            let fwd = forward_pass(net, x)?;
            for (l, out) in fwd.layers.iter().enumerate() {
                for &j in out.selection.indices() {
                    c[l][j] += 1.0 / split.len() as f64;
                }
            }
        }
        Ok(c)
    };
    let r = count(retain)?;
    let f = count(forget)?;
    let floor = 1.0 / retain.len().max(1) as f64;
    let mut out = Vec::new();
    for l in 0..shape.layers {
        for j in 0..shape.experts {
            out.push(ExpertCensus {
                layer: l,
                expert: j,
                retain_freq: r[l][j],
                forget_freq: f[l][j],
                ratio: f[l][j] / r[l][j].max(floor),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub loss_curve: Vec<f64>,
    pub train_accuracy: f64,
    pub retain_test_accuracy: f64,
    pub forget_test_accuracy: f64,
    pub census: Vec<ExpertCensus>,
    /// Largest forget/retain selection ratio in the census.
    pub max_specialization: f64,
}

/// Random network for a run seed. The initialization stream is offset from
/// the task stream so that both can be keyed by the same seed.
pub fn init_network(shape: NetShape, router_scale: f64, seed: u64) -> Result<MoENetwork> {
    MoENetwork::random(shape, router_scale, &mut ChaCha8Rng::seed_from_u64(seed + INIT_SEED_OFFSET))
}

/// Added to a run seed to key network initialization.
pub const INIT_SEED_OFFSET: u64 = 1000;

/// Full-batch Adam on cross-entropy over retain ∪ forget training data.
/// Does not apply the quality gate.
pub fn train_classifier(
    net: &MoENetwork,
    task: &SyntheticTask,
    cfg: &PretrainConfig,
) -> Result<(MoENetwork, PretrainReport)> {
    if !(cfg.lr > 0.0) {
        return Err(Error::contract("pretraining lr must be > 0"));
    }
    if !(0.0..1.0).contains(&cfg.label_smoothing) {
        return Err(Error::contract("label_smoothing must be in [0, 1)"));
    }
    let mut net = net.clone();
    let data = task.train_union();
    let mut opt = Adam::new(cfg.lr, net.num_params());
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (loss, grads) = mean_cross_entropy(&net, &data, cfg.label_smoothing)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                step,
                message: "non-finite pretraining loss".into(),
            });
        }
        loss_curve.push(loss);
        opt.step(&mut net, &grads);
    }
    let census = selection_census(&net, &task.retain_train, &task.forget_train)?;
    let max_specialization = census
        .iter()
        .map(|c| c.ratio)
        .fold(0.0, f64::max);
    let report = PretrainReport {
        steps: cfg.steps,
        loss_curve,
        train_accuracy: accuracy(&net, &data.inputs, &data.labels)?,
        retain_test_accuracy: accuracy(&net, &task.retain_test.inputs, &task.retain_test.labels)?,
        forget_test_accuracy: accuracy(&net, &task.forget_test.inputs, &task.forget_test.labels)?,
        census,
        max_specialization,
    };
    Ok((net, report))
}

/// Trains the reference network and rejects it unless it reaches
/// `min_accuracy` on the training data and has a forget-specialized expert.
/// With zero steps the network is returned unchanged and unchecked.
pub fn pretrain(
    net: &MoENetwork,
    task: &SyntheticTask,
    cfg: &PretrainConfig,
) -> Result<(MoENetwork, PretrainReport)> {
    let (out, report) = train_classifier(net, task, cfg)?;
    if cfg.steps == 0 {
        return Ok((out, report));
    }
    if report.train_accuracy < cfg.min_accuracy {
        return Err(Error::Fixture(format!(
            "train accuracy {:.3} below {:.3} after {} steps",
            report.train_accuracy, cfg.min_accuracy, cfg.steps
        )));
    }
    if report.max_specialization < cfg.min_specialization {
        return Err(Error::Fixture(format!(
            "no forget-specialized expert (best ratio {:.2} < {:.2})",
            report.max_specialization, cfg.min_specialization
        )));
    }
    Ok((out, report))
}
