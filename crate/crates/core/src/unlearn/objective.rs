//! Unlearning objectives sharing one gradient interface.
//!
//! * `gd`: gradient ascent on forget cross-entropy, `L = −CE_f`.
//! * `kl`: `−CE_f + w · KL(p_θ ‖ p_ref)` on retain inputs.
//! * `npo`: `−(2/β) log σ(−β (log p_θ(y|x) − log p_ref(y|x)))` on forget pairs.
//! * `rmu`: `‖h_ℓ − c·u‖²` on forget inputs plus `w · ‖h_ℓ − h_ℓ^ref‖²` on
//!   retain inputs, for a fixed random unit vector `u`.
//!
//! Every loss is a mean over its split.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{backward, cross_entropy, forward_pass, log_softmax, softmax, ForwardPass, GradSeed, Gradients, MoENetwork};
use crate::numerics::norm;

use super::task::Split;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Gd,
    Kl,
    Npo,
    Rmu,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Gd, Objective::Kl, Objective::Npo, Objective::Rmu];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Gd => "gd",
            Objective::Kl => "kl",
            Objective::Npo => "npo",
            Objective::Rmu => "rmu",
        }
    }

    pub fn needs_reference(self) -> bool {
        !matches!(self, Objective::Gd)
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown objective '{s}' (expected gd, kl, npo or rmu)")))
    }
}

/// Objective hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveParams {
    pub kl_weight: f64,
    pub npo_beta: f64,
    /// Steering scale `c`.
    pub rmu_coeff: f64,
    pub rmu_anchor_weight: f64,
    /// Hidden-state index `ℓ` (0 is the input); defaults to `(L + 1) / 2`.
    pub rmu_layer: Option<usize>,
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        Self {
            kl_weight: 1.0,
            npo_beta: 1.0,
            rmu_coeff: 6.0,
            rmu_anchor_weight: 1.0,
            rmu_layer: None,
        }
    }
}

/// Reference outputs computed once from the pre-unlearning network.
#[derive(Clone, Debug)]
pub struct Reference {
    pub retain_log_probs: Vec<Vec<f64>>,
    pub forget_log_probs: Vec<Vec<f64>>,
    pub retain_hidden: Vec<Vec<f64>>,
    pub rmu_layer: usize,
    pub rmu_target: Vec<f64>,
}

impl Reference {
    pub fn new(
        reference: &MoENetwork,
        retain: &Split,
        forget: &Split,
        params: &ObjectiveParams,
        seed: u64,
    ) -> Result<Self> {
        let nl = reference.layers.len();
        let rmu_layer = params.rmu_layer.unwrap_or(nl.div_ceil(2));
        if rmu_layer == 0 || rmu_layer > nl {
            return Err(Error::contract(format!(
                "rmu_layer must be in 1..={nl}, got {rmu_layer}"
            )));
        }
        let mut retain_log_probs = Vec::with_capacity(retain.len());
        let mut retain_hidden = Vec::with_capacity(retain.len());
        for x in &retain.inputs {
            let fwd = forward_pass(reference, x)?;
            retain_log_probs.push(log_softmax(&fwd.logits));
            retain_hidden.push(fwd.hidden[rmu_layer].clone());
        }
        let forget_log_probs = forget
            .inputs
            .iter()
            .map(|x| Ok(log_softmax(&forward_pass(reference, x)?.logits)))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x524D_5500);
        let mut u: Vec<f64> = (0..reference.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let nu = norm(&u);
        u.iter_mut().for_each(|v| *v *= params.rmu_coeff / nu);
        Ok(Self {
            retain_log_probs,
            forget_log_probs,
            retain_hidden,
            rmu_layer,
            rmu_target: u,
        })
    }
}

fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss value and gradient of `objective` at `net`.
pub fn objective_grad(
    net: &MoENetwork,
    retain: &Split,
    forget: &Split,
    objective: Objective,
    params: &ObjectiveParams,
    reference: Option<&Reference>,
) -> Result<(f64, Gradients)> {
    let need_ref = || {
        reference.ok_or_else(|| {
            Error::contract(format!("objective {objective} needs a reference network"))
        })
    };
    let nf = forget.len() as f64;
    let nr = retain.len() as f64;
    match objective {
        Objective::Gd => {
            let loss = |i: usize, fwd: &ForwardPass| {
                let (l, mut g) = cross_entropy(&fwd.logits, forget.labels[i]);
                g.iter_mut().for_each(|v| *v = -*v / nf);
                Ok((-l / nf, GradSeed { logits: Some(g), hidden: vec![] }))
            };
            backward(net, &forget.inputs, &loss)
        }
        Objective::Kl => {
            let r = need_ref()?;
            let (lf, mut g) = objective_grad(net, retain, forget, Objective::Gd, params, None)?;
            let w = params.kl_weight;
            let loss = |i: usize, fwd: &ForwardPass| {
                let lp = log_softmax(&fwd.logits);
                let p = softmax(&fwd.logits);
                let q = &r.retain_log_probs[i];
                let kl: f64 = p.iter().zip(&lp).zip(q).map(|((p, a), b)| p * (a - b)).sum();
                let seed: Vec<f64> = p
                    .iter()
                    .zip(&lp)
                    .zip(q)
                    .map(|((p, a), b)| w * p * (a - b - kl) / nr)
                    .collect();
                Ok((w * kl / nr, GradSeed { logits: Some(seed), hidden: vec![] }))
            };
            let (lr, gr) = backward(net, &retain.inputs, &loss)?;
            g.add_scaled(1.0, &gr);
            Ok((lf + lr, g))
        }
        Objective::Npo => {
            let r = need_ref()?;
            let beta = params.npo_beta;
            if !(beta > 0.0) {
                return Err(Error::contract("npo_beta must be > 0"));
            }
            let loss = |i: usize, fwd: &ForwardPass| {
                let y = forget.labels[i];
                let lp = log_softmax(&fwd.logits);
                let ratio = lp[y] - r.forget_log_probs[i][y];
                let l = -(2.0 / beta) * log_sigmoid(-beta * ratio) / nf;
                let dratio = 2.0 * sigmoid(beta * ratio) / nf;
                let p = softmax(&fwd.logits);
                let seed: Vec<f64> = p
                    .iter()
                    .enumerate()
                    .map(|(c, pc)| dratio * (if c == y { 1.0 } else { 0.0 } - pc))
                    .collect();
                Ok((l, GradSeed { logits: Some(seed), hidden: vec![] }))
            };
            backward(net, &forget.inputs, &loss)
        }
        Objective::Rmu => {
            let r = need_ref()?;
            let layer = r.rmu_layer;
            let steer = |i: usize, fwd: &ForwardPass| {
                let _ = i;
                let h = &fwd.hidden[layer];
                let diff: Vec<f64> = h.iter().zip(&r.rmu_target).map(|(a, b)| a - b).collect();
                let l: f64 = diff.iter().map(|v| v * v).sum::<f64>() / nf;
                let g: Vec<f64> = diff.iter().map(|v| 2.0 * v / nf).collect();
                Ok((l, GradSeed { logits: None, hidden: vec![(layer, g)] }))
            };
            let (lf, mut g) = backward(net, &forget.inputs, &steer)?;
            let w = params.rmu_anchor_weight;
            if w > 0.0 {
                let anchor = |i: usize, fwd: &ForwardPass| {
                    let h = &fwd.hidden[layer];
                    let diff: Vec<f64> = h.iter().zip(&r.retain_hidden[i]).map(|(a, b)| a - b).collect();
                    let l: f64 = w * diff.iter().map(|v| v * v).sum::<f64>() / nr;
                    let g: Vec<f64> = diff.iter().map(|v| 2.0 * w * v / nr).collect();
                    Ok((l, GradSeed { logits: None, hidden: vec![(layer, g)] }))
                };
                let (la, ga) = backward(net, &retain.inputs, &anchor)?;
                g.add_scaled(1.0, &ga);
                return Ok((lf + la, g));
            }
            Ok((lf, g))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::NetShape;
    use crate::unlearn::task::{generate_task, TaskConfig};

    fn fixture() -> (MoENetwork, Split, Split) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = NetShape { layers: 2, experts: 4, dim: 12, k: 2, classes: 4 };
        let net = MoENetwork::random(shape, 1.0, &mut rng).unwrap();
        let cfg = TaskConfig { dim: 12, classes: 4, forget_clusters: 2, ..Default::default() };
        let t = generate_task(&cfg).unwrap();
        (net, t.retain_train, t.forget_train)
    }

    #[test]
    fn npo_at_reference_is_two_log_two_over_beta() {
        let (net, r, f) = fixture();
        for beta in [0.5, 1.0, 3.0] {
            let params = ObjectiveParams { npo_beta: beta, ..Default::default() };
            let reference = Reference::new(&net, &r, &f, &params, 0).unwrap();
            let (l, _) = objective_grad(&net, &r, &f, Objective::Npo, &params, Some(&reference)).unwrap();
            assert!((l - 2.0 / beta * 2f64.ln()).abs() < 1e-12, "{l}");
        }
    }

    #[test]
    fn reference_required() {
        let (net, r, f) = fixture();
        let p = ObjectiveParams::default();
        for o in [Objective::Kl, Objective::Npo, Objective::Rmu] {
            assert!(matches!(
                objective_grad(&net, &r, &f, o, &p, None),
                Err(Error::Contract(_))
            ));
        }
        assert!(objective_grad(&net, &r, &f, Objective::Gd, &p, None).is_ok());
    }

    #[test]
    fn kl_term_vanishes_at_reference() {
        let (net, r, f) = fixture();
        let p = ObjectiveParams { kl_weight: 5.0, ..Default::default() };
        let reference = Reference::new(&net, &r, &f, &p, 0).unwrap();
        let (lk, gk) = objective_grad(&net, &r, &f, Objective::Kl, &p, Some(&reference)).unwrap();
        let (lg, gg) = objective_grad(&net, &r, &f, Objective::Gd, &p, None).unwrap();
        assert!((lk - lg).abs() < 1e-12);
        let diff = gk.flat().iter().zip(gg.flat()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-12);
    }

    #[test]
    fn names_round_trip() {
        for o in Objective::ALL {
            assert_eq!(o.name().parse::<Objective>().unwrap(), o);
        }
        assert!("sgd".parse::<Objective>().is_err());
    }
}
