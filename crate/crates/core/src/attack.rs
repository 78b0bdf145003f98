//! Expert-forcing probe: override post-unlearning routing and check whether
//! bypassed experts still carry the forgotten mapping.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{argmax, network_forward_with, topk_select, ExpertParams, ForwardPass, MoELayer, MoENetwork, Readout, SelectionSet};
use crate::numerics::Matrix;
use crate::routing::SelectionTrace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForcingMode {
    /// Route through the pre-unlearning selection.
    PreSelection,
    /// Route through the `m` highest-scoring experts outside the current
    /// selection.
    TopMNonselected,
}

impl FromStr for ForcingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre_selection" => Ok(ForcingMode::PreSelection),
            "top_m_nonselected" => Ok(ForcingMode::TopMNonselected),
            _ => Err(Error::Contract(format!(
                "unknown forcing mode '{s}' (expected pre_selection or top_m_nonselected)"
            ))),
        }
    }
}

impl fmt::Display for ForcingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ForcingMode::PreSelection => "pre_selection",
            ForcingMode::TopMNonselected => "top_m_nonselected",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForcingPolicy {
    pub mode: ForcingMode,
    /// Forced experts per layer; `None` means `min(5, E − k)`.
    pub m: Option<usize>,
    /// Probe each of the `m` experts alone and count a hit if any probe is
    /// correct, instead of one joint forward through all `m`.
    pub best_of: bool,
}

impl Default for ForcingPolicy {
    fn default() -> Self {
        Self {
            mode: ForcingMode::TopMNonselected,
            m: None,
            best_of: false,
        }
    }
}

impl ForcingPolicy {
    pub fn resolved_m(&self, experts: usize, k: usize) -> Result<usize> {
        let limit = experts.saturating_sub(k);
        let m = self.m.unwrap_or(limit.min(5));
        if m == 0 || m > limit {
            return Err(Error::contract(format!(
                "forcing m must be in 1..={limit} for E={experts}, k={k}, got {m}"
            )));
        }
        Ok(m)
    }
}

/// The `m` highest-scoring experts not in the top-k of `scores`, best first.
fn nonselected_ranked(scores: &[f64], k: usize, m: usize) -> Result<Vec<usize>> {
    let current = topk_select(scores, k)?;
    let mut rest: Vec<usize> = (0..scores.len()).filter(|j| !current.contains(*j)).collect();
    rest.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    rest.truncate(m);
    Ok(rest)
}

/// Forward pass under forcing. `pre` is the pre-unlearning selection of this
/// query, one set per layer, required for [`ForcingMode::PreSelection`].
/// `probe` restricts top-m forcing to the single expert of that rank.
pub fn forced_forward(
    net: &MoENetwork,
    x: &[f64],
    policy: &ForcingPolicy,
    pre: Option<&[SelectionSet]>,
    probe: Option<usize>,
) -> Result<ForwardPass> {
    let shape = net.shape();
    match policy.mode {
        ForcingMode::PreSelection => {
            let pre = pre.ok_or_else(|| Error::contract("pre_selection forcing needs the pre-unlearning trace"))?;
            if pre.len() != shape.layers {
                return Err(Error::contract(format!(
                    "trace has {} layers, network has {}",
                    pre.len(),
                    shape.layers
                )));
            }
            network_forward_with(net, x, |l, _, _| Ok(pre[l].clone()))
        }
        ForcingMode::TopMNonselected => {
            let m = policy.resolved_m(shape.experts, shape.k)?;
            network_forward_with(net, x, |_, scores, k| {
                let ranked = nonselected_ranked(scores, k, m)?;
                Ok(match probe {
                    Some(r) => SelectionSet::new(vec![ranked[r.min(ranked.len() - 1)]]),
                    None => SelectionSet::new(ranked),
                })
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub policy: ForcingPolicy,
    pub total_queries: usize,
    /// Forget queries whose selection changed at some layer; the attack
    /// metrics are computed over these.
    pub shifted_queries: usize,
    pub normal_fa: f64,
    pub forced_fa: f64,
    /// `(forced_fa − 1/C) / max(normal_fa − 1/C, 0.01)`, clamped at 0.
    pub vulnerability: f64,
}

pub const VULNERABILITY_FLOOR: f64 = 0.01;

pub fn vulnerability(normal_fa: f64, forced_fa: f64, classes: usize) -> f64 {
    let chance = 1.0 / classes as f64;
    ((forced_fa - chance) / (normal_fa - chance).max(VULNERABILITY_FLOOR)).max(0.0)
}

/// Forget accuracy under normal and forced routing over the forget queries
/// whose routing shifted relative to `pre`. Without shifted queries the
/// accuracies cover every query and vulnerability is 0.
pub fn forcing_attack(
    net_post: &MoENetwork,
    ids: &[String],
    inputs: &[Vec<f64>],
    labels: &[usize],
    policy: &ForcingPolicy,
    pre: &SelectionTrace,
) -> Result<AttackReport> {
    if ids.len() != inputs.len() || labels.len() != inputs.len() {
        return Err(Error::contract("ids, inputs and labels differ in length"));
    }
    let index = pre.index();
    let shape = net_post.shape();
    let mut rows = Vec::with_capacity(inputs.len());
    for (id, x) in ids.iter().zip(inputs) {
        let q = *index
            .get(id.as_str())
            .ok_or_else(|| Error::contract(format!("query {id} missing from the pre-unlearning trace")))?;
        let fwd = crate::moe::forward_pass(net_post, x)?;
        let shifted = fwd
            .layers
            .iter()
            .zip(&pre.selections[q])
            .any(|(o, s)| &o.selection != s);
        rows.push((q, fwd, shifted));
    }
    let shifted_queries = rows.iter().filter(|r| r.2).count();
    let mut normal = 0usize;
    let mut forced = 0usize;
    let mut n = 0usize;
    for (i, (q, fwd, shifted)) in rows.iter().enumerate() {
        if shifted_queries > 0 && !shifted {
            continue;
        }
        n += 1;
        let y = labels[i];
        if argmax(&fwd.logits) == y {
            normal += 1;
        }
        let hit = if policy.best_of && policy.mode == ForcingMode::TopMNonselected {
            let m = policy.resolved_m(shape.experts, shape.k)?;
            let mut any = false;
            for r in 0..m {
                let f = forced_forward(net_post, &inputs[i], policy, Some(&pre.selections[*q]), Some(r))?;
                if argmax(&f.logits) == y {
                    any = true;
                    break;
                }
            }
            any
        } else {
            let f = forced_forward(net_post, &inputs[i], policy, Some(&pre.selections[*q]), None)?;
            argmax(&f.logits) == y
        };
        if hit {
            forced += 1;
        }
    }
    let denom = n.max(1) as f64;
    let normal_fa = normal as f64 / denom;
    let forced_fa = forced as f64 / denom;
    let vulnerability = if shifted_queries == 0 {
        0.0
    } else {
        vulnerability(normal_fa, forced_fa, shape.classes)
    };
    Ok(AttackReport {
        policy: policy.clone(),
        total_queries: inputs.len(),
        shifted_queries,
        normal_fa,
        forced_fa,
        vulnerability,
    })
}

/// Hand-built network whose router sends class-1 inputs away from the one
/// expert that still maps them correctly.
///
/// One layer, `d = 4`, `E = 4`, `k = 1`, two classes. Inputs are `e0`
/// (class 0) and `e1` (class 1). Expert 3 maps `e1` strongly onto the
/// class-1 feature `e3`; the other experts carry nothing. The readout keys
/// on `e2` versus `e3` with a bias towards class 0. The router prefers the
/// empty expert 0 for `e1`, so normal routing misclassifies class-1 queries
/// while top-m forcing reaches expert 3 and recovers them.
pub fn redirection_fixture() -> Result<(MoENetwork, Vec<Vec<f64>>, Vec<usize>)> {
    let d = 4;
    let mut w3 = Matrix::zeros(d, d);
    w3.set(3, 1, 10.0);
    let experts = vec![
        ExpertParams::zero(d),
        ExpertParams::zero(d),
        ExpertParams::zero(d),
        ExpertParams { weight: w3, bias: vec![0.0; d] },
    ];
    let router = Matrix::from_rows(&[
        [1.0, 2.0, 0.0, 0.0],
        [0.0, 0.5, 0.0, 0.0],
        [0.0, 0.4, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
    ])?;
    let layer = MoELayer::new(router, experts, 1)?;
    let readout = Readout {
        weight: Matrix::from_rows(&[[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])?,
        bias: vec![1.0, 0.0],
    };
    let net = MoENetwork::new(d, vec![layer], readout)?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..8 {
        let s = 1.0 + 0.05 * i as f64;
        inputs.push(vec![0.0, s, 0.0, 0.0]);
        labels.push(1);
    }
    Ok((net, inputs, labels))
}
