//! One unlearning run under a chosen enforcement mode, and the threshold
//! sweep built on it.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::attack::{forcing_attack, AttackReport, ForcingPolicy};
use crate::constraints::{capture_retain_cache, ConstraintBank, RetainCache, DEFAULT_EPS};
use crate::cost;
use crate::enforce::{
    constrain_router_gradients, global_nullspace_constrain, guard_selections, GlobalProjectors, KaczmarzConfig, StepStats,
    GUARD_MAX_HALVINGS,
};
use crate::error::{Error, Result};
use crate::moe::{accuracy, forward_pass, Gradients, MoENetwork};
use crate::numerics::{norm, Matrix};
use crate::ptc::{apply_ptc, PtcResult, DEFAULT_LAMBDA};
use crate::routing::{jaccard, routing_stability, SelectionTrace};

use super::objective::{objective_grad, Objective, ObjectiveParams, Reference};
use super::task::{Split, SyntheticTask};
use super::train::{mask_gradients, SplitOptimizer, Trainable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Enforcement {
    None,
    ExpertSpecific,
    FullNull,
    Ptc,
}

impl Enforcement {
    pub const ALL: [Enforcement; 4] = [
        Enforcement::None,
        Enforcement::ExpertSpecific,
        Enforcement::FullNull,
        Enforcement::Ptc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Enforcement::None => "none",
            Enforcement::ExpertSpecific => "expert_specific",
            Enforcement::FullNull => "full_null",
            Enforcement::Ptc => "ptc",
        }
    }
}

impl fmt::Display for Enforcement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Enforcement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Enforcement::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                Error::Contract(format!(
                    "unknown enforcement '{s}' (expected none, expert_specific, full_null or ptc)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnConfig {
    pub objective: Objective,
    pub enforcement: Enforcement,
    /// Step count `K`.
    pub steps: usize,
    pub lr: f64,
    /// Router step size as a multiple of `lr`.
    pub router_lr_scale: f64,
    /// Heavy-ball momentum for expert and readout parameters.
    pub momentum: f64,
    pub kl_weight: f64,
    pub npo_beta: f64,
    pub rmu_coeff: f64,
    pub rmu_anchor_weight: f64,
    pub rmu_layer: Option<usize>,
    /// Eigenvalue threshold of the null-space projectors.
    pub eps: f64,
    /// Scale `eps` by the largest eigenvalue of each retain Gram matrix.
    pub eps_relative: bool,
    pub margin_slack: f64,
    /// Ridge parameter of the post-training correction.
    pub lambda: f64,
    /// Capture drifted inputs once instead of after each layer's correction.
    pub ptc_one_shot: bool,
    pub kaczmarz_k_max: usize,
    pub kaczmarz_check_every: usize,
    /// Recompute selection margins from the current routers before each
    /// step so the bound covers the cumulative change.
    pub refresh_margins: bool,
    /// Shrink constrained router updates until cached retain selections are
    /// reproduced exactly.
    pub selection_guard: bool,
    pub train_routers: bool,
    pub train_experts: bool,
    pub train_readout: bool,
    /// Stop once forget-train accuracy is at or below this value.
    pub stop_at_fa: Option<f64>,
    pub eval_every: usize,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Recheck cached retain selections every this many steps (0 = never).
    pub check_cached_every: usize,
    pub attack: ForcingPolicy,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        let op = ObjectiveParams::default();
        Self {
            objective: Objective::Gd,
            enforcement: Enforcement::None,
            steps: 1000,
            lr: 0.01,
            router_lr_scale: 20.0,
            momentum: 0.0,
            kl_weight: op.kl_weight,
            npo_beta: op.npo_beta,
            rmu_coeff: op.rmu_coeff,
            rmu_anchor_weight: op.rmu_anchor_weight,
            rmu_layer: op.rmu_layer,
            eps: DEFAULT_EPS,
            eps_relative: false,
            margin_slack: 1e-6,
            lambda: DEFAULT_LAMBDA,
            ptc_one_shot: false,
            kaczmarz_k_max: 100,
            kaczmarz_check_every: 25,
            refresh_margins: true,
            selection_guard: true,
            train_routers: true,
            train_experts: true,
            train_readout: true,
            stop_at_fa: None,
            eval_every: 1,
            grad_clip: Some(20.0),
            check_cached_every: 0,
            attack: ForcingPolicy::default(),
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 && self.stop_at_fa.is_some() {
            return Err(Error::contract("stop_at_fa needs steps >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::contract(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.router_lr_scale > 0.0) {
            return Err(Error::contract("router_lr_scale must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract("momentum must be in [0, 1)"));
        }
        if !(self.eps >= 0.0 && self.margin_slack >= 0.0) {
            return Err(Error::contract("eps and margin_slack must be >= 0"));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::contract("lambda must be > 0"));
        }
        if !(self.npo_beta > 0.0 && self.kl_weight >= 0.0 && self.rmu_anchor_weight >= 0.0) {
            return Err(Error::contract("npo_beta must be > 0; kl_weight and rmu_anchor_weight >= 0"));
        }
        if self.eval_every == 0 {
            return Err(Error::contract("eval_every must be >= 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::contract("grad_clip must be > 0"));
            }
        }
        self.kaczmarz().validate()
    }

    pub fn objective_params(&self) -> ObjectiveParams {
        ObjectiveParams {
            kl_weight: self.kl_weight,
            npo_beta: self.npo_beta,
            rmu_coeff: self.rmu_coeff,
            rmu_anchor_weight: self.rmu_anchor_weight,
            rmu_layer: self.rmu_layer,
        }
    }

    pub fn kaczmarz(&self) -> KaczmarzConfig {
        KaczmarzConfig {
            k_max: self.kaczmarz_k_max,
            margin_slack: self.margin_slack,
            convergence_check_every: self.kaczmarz_check_every,
            rng_seed: self.seed,
            ..Default::default()
        }
    }

    pub fn trainable(&self) -> Trainable {
        Trainable {
            routers: self.train_routers,
            experts: self.train_experts,
            readout: self.train_readout,
        }
    }
}

/// Aggregated enforcement diagnostics over a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnforcementSummary {
    pub infeasible_rows: usize,
    pub kaczmarz_iterations: usize,
    pub projections: usize,
    pub max_equality_residual: f64,
    /// `(layer, expert)` pairs whose selected retain inputs left no null space.
    pub empty_nullspaces: Vec<(usize, usize)>,
    /// Layers whose global null space was empty.
    pub empty_global_layers: Vec<usize>,
    /// Router-update halvings spent by the selection guard.
    pub guard_halvings: usize,
    /// Layer updates the selection guard dropped.
    pub guard_zeroed: usize,
}

/// Counted operations and wall time per phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub objective_flops: u64,
    pub capture_flops: u64,
    pub build_flops: u64,
    pub enforce_flops: u64,
    pub correction_flops: u64,
    /// Build, per-step enforcement and correction together.
    pub machinery_flops: u64,
    pub capture_s: f64,
    pub build_s: f64,
    pub train_s: f64,
    pub enforce_s: f64,
    pub correction_s: f64,
    pub eval_s: f64,
    /// Everything except evaluation.
    pub run_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: UnlearnConfig,
    pub task_seed: u64,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub fa_pre: f64,
    pub fa_post: f64,
    pub ra_pre: f64,
    pub ra_post: f64,
    pub forget_train_acc_pre: f64,
    pub forget_train_acc_post: f64,
    /// Per-layer routing stability on held-out retain ∪ forget queries.
    pub rs_per_layer: Vec<f64>,
    pub rs: f64,
    pub rs_retain: f64,
    pub rs_forget: f64,
    /// Stability on the cached retain inputs.
    pub rs_cached: f64,
    /// Smallest cached-retain stability seen at a per-step check.
    pub cached_rs_min: Option<f64>,
    /// Per-step checks where cached-retain stability was below 1.
    pub cached_rs_breaks: usize,
    pub attack: AttackReport,
    pub loss_curve: Vec<f64>,
    pub enforcement: EnforcementSummary,
    pub ptc: Option<PtcResult>,
    pub cost: CostReport,
}

impl RunReport {
    pub const CSV_HEADER: [&'static str; 24] = [
        "objective",
        "enforcement",
        "seed",
        "task_seed",
        "steps_run",
        "fa_pre",
        "fa_post",
        "ra_pre",
        "ra_post",
        "rs",
        "rs_retain",
        "rs_forget",
        "rs_cached",
        "normal_fa",
        "forced_fa",
        "vulnerability",
        "shifted_queries",
        "infeasible_rows",
        "empty_nullspaces",
        "machinery_flops",
        "objective_flops",
        "train_s",
        "run_s",
        "eps",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.config.objective.to_string(),
            self.config.enforcement.to_string(),
            self.config.seed.to_string(),
            self.task_seed.to_string(),
            self.steps_run.to_string(),
            self.fa_pre.to_string(),
            self.fa_post.to_string(),
            self.ra_pre.to_string(),
            self.ra_post.to_string(),
            self.rs.to_string(),
            self.rs_retain.to_string(),
            self.rs_forget.to_string(),
            self.rs_cached.to_string(),
            self.attack.normal_fa.to_string(),
            self.attack.forced_fa.to_string(),
            self.attack.vulnerability.to_string(),
            self.attack.shifted_queries.to_string(),
            self.enforcement.infeasible_rows.to_string(),
            self.enforcement.empty_nullspaces.len().to_string(),
            self.cost.machinery_flops.to_string(),
            self.cost.objective_flops.to_string(),
            self.cost.train_s.to_string(),
            self.cost.run_s.to_string(),
            self.config.eps.to_string(),
        ]
    }

    /// True when every metric is finite and accuracies lie in `[0, 1]`.
    pub fn is_well_formed(&self) -> bool {
        let acc = [
            self.fa_pre,
            self.fa_post,
            self.ra_pre,
            self.ra_post,
            self.attack.normal_fa,
            self.attack.forced_fa,
        ];
        let rs = [self.rs, self.rs_retain, self.rs_forget, self.rs_cached];
        acc.iter().chain(&rs).all(|v| (0.0..=1.0).contains(v))
            && self.attack.vulnerability.is_finite()
            && self.loss_curve.iter().all(|v| v.is_finite())
    }
}

/// Mean Jaccard similarity between cached selections and the current ones
/// on the cached retain inputs.
pub fn cached_stability(net: &MoENetwork, cache: &RetainCache, inputs: &[Vec<f64>]) -> Result<f64> {
    if inputs.len() != cache.num_inputs() {
        return Err(Error::contract("retain inputs do not match the cache"));
    }
    let nl = cache.num_layers();
    let mut total = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let fwd = forward_pass(net, x)?;
        for (l, out) in fwd.layers.iter().enumerate() {
            total += jaccard(&cache.layers[l].selections[i], &out.selection);
        }
    }
    Ok(total / (nl * inputs.len()).max(1) as f64)
}

fn split_accuracy(net: &MoENetwork, s: &Split) -> Result<f64> {
    accuracy(net, &s.inputs, &s.labels)
}

fn clip(grads: &mut Gradients, max_norm: f64) {
    let n = norm(&grads.flat());
    if n > max_norm {
        grads.scale(max_norm / n);
    }
}

enum Machinery {
    Nothing,
    Expert(Box<ConstraintBank>),
    Global(GlobalProjectors),
}

/// Runs `cfg.steps` unlearning steps from `net_pre` and evaluates the result.
///
/// `on_step` receives the enforcement statistics of every step in
/// expert-specific mode.
pub fn unlearn_run(
    net_pre: &MoENetwork,
    task: &SyntheticTask,
    cfg: &UnlearnConfig,
    mut on_step: Option<&mut dyn FnMut(usize, &StepStats)>,
) -> Result<(MoENetwork, RunReport)> {
    cfg.validate()?;
    let t_all = Instant::now();
    let mut cost_rep = CostReport::default();
    let retain = &task.retain_train;
    let forget = &task.forget_train;

    let t = Instant::now();
    let (cache, f) = cost::measure(|| capture_retain_cache(net_pre, &retain.ids, &retain.inputs));
    let cache = cache?;
    cost_rep.capture_flops = f;
    cost_rep.capture_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (machinery, f) = cost::measure(|| -> Result<Machinery> {
        Ok(match cfg.enforcement {
            Enforcement::ExpertSpecific => Machinery::Expert(Box::new(ConstraintBank::build_scaled(&cache, cfg.eps, cfg.eps_relative)?)),
            Enforcement::FullNull => Machinery::Global(GlobalProjectors::build_scaled(&cache, cfg.eps, cfg.eps_relative)?),
            Enforcement::None | Enforcement::Ptc => Machinery::Nothing,
        })
    });
    let mut machinery = machinery?;
    cost_rep.build_flops = f;
    cost_rep.build_s = t.elapsed().as_secs_f64();

    let mut summary = EnforcementSummary::default();
    match &machinery {
        Machinery::Expert(bank) => summary.empty_nullspaces = bank.empty_nullspaces(),
        Machinery::Global(g) => summary.empty_global_layers = g.empty_layers(),
        Machinery::Nothing => {}
    }

    let params = cfg.objective_params();
    let reference = if cfg.objective.needs_reference() {
        Some(Reference::new(net_pre, retain, forget, &params, cfg.seed)?)
    } else {
        None
    };

    let eval = task.eval_set();
    let pre_trace = SelectionTrace::capture(net_pre, "pre", &eval.ids, &eval.inputs)?;
    let fa_pre = split_accuracy(net_pre, &task.forget_test)?;
    let ra_pre = split_accuracy(net_pre, &task.retain_test)?;
    let forget_train_acc_pre = split_accuracy(net_pre, forget)?;

    let mut net = net_pre.clone();
    let trainable = cfg.trainable();
    let mut opt = SplitOptimizer::new(cfg.lr, cfg.momentum, trainable, net.num_params());
    opt.router_lr = cfg.lr * cfg.router_lr_scale;
    let router_lr = opt.router_lr;
    let kcfg = cfg.kaczmarz();
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut steps_run = 0;
    let mut stopped_early = false;
    let mut cached_rs_min: Option<f64> = None;
    let mut cached_rs_breaks = 0;

    for step in 0..cfg.steps {
        if let Some(thr) = cfg.stop_at_fa {
            if step % cfg.eval_every == 0 && split_accuracy(&net, forget).map_err(diverged(step))? <= thr {
                stopped_early = true;
                break;
            }
        }
        let t = Instant::now();
        let (res, f) = cost::measure(|| objective_grad(&net, retain, forget, cfg.objective, &params, reference.as_ref()));
        let (loss, mut grads) = res.map_err(diverged(step))?;
        cost_rep.objective_flops += f;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                step,
                message: format!("loss {loss}"),
            });
        }
        mask_gradients(&mut grads, trainable);
        if let Some(c) = cfg.grad_clip {
            clip(&mut grads, c);
        }
        cost_rep.train_s += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let (res, f) = cost::measure(|| -> Result<()> {
            match &mut machinery {
                Machinery::Expert(bank) if trainable.routers => {
                    if cfg.refresh_margins && step > 0 {
                        let routers: Vec<&Matrix> = net.layers.iter().map(|l| &l.router.theta).collect();
                        bank.refresh_margins(&cache, &routers)?;
                    }
                    let mut rg: Vec<Matrix> = grads.layers.iter().map(|l| l.router.clone()).collect();
                    let stats = constrain_router_gradients(&mut rg, opt.router_lr, bank, &cache, &kcfg, step as u64)?;
                    for (l, g) in grads.layers.iter_mut().zip(rg) {
                        l.router = g;
                    }
                    summary.infeasible_rows += stats.infeasible_rows;
                    summary.kaczmarz_iterations += stats.total_iterations;
                    summary.projections += stats.total_projections;
                    summary.max_equality_residual = summary.max_equality_residual.max(stats.max_equality_residual);
                    if let Some(cb) = on_step.as_mut() {
                        cb(step, &stats);
                    }
                }
                Machinery::Global(g) => {
                    let mut rg: Vec<Matrix> = grads.layers.iter().map(|l| l.router.clone()).collect();
                    global_nullspace_constrain(&mut rg, g)?;
                    for (l, g) in grads.layers.iter_mut().zip(rg) {
                        l.router = g;
                    }
                }
                _ => {}
            }
            let guarded = matches!(cfg.enforcement, Enforcement::ExpertSpecific | Enforcement::FullNull);
            if cfg.selection_guard && guarded && trainable.routers {
                for (l, lg) in grads.layers.iter_mut().enumerate() {
                    let mut update = lg.router.scale(-router_lr);
                    let out = guard_selections(&net.layers[l].router.theta, &mut update, &cache, l, GUARD_MAX_HALVINGS)?;
                    summary.guard_halvings += out.halvings as usize;
                    summary.guard_zeroed += out.zeroed as usize;
                    lg.router = update.scale(-1.0 / router_lr);
                }
            }
            Ok(())
        });
        res.map_err(diverged(step))?;
        cost_rep.enforce_flops += f;
        cost_rep.enforce_s += t.elapsed().as_secs_f64();

        let t = Instant::now();
        opt.step(&mut net, &grads);
        cost_rep.train_s += t.elapsed().as_secs_f64();
        loss_curve.push(loss);
        steps_run = step + 1;

        if cfg.check_cached_every > 0 && steps_run % cfg.check_cached_every == 0 {
            let rs = cached_stability(&net, &cache, &retain.inputs)?;
            cached_rs_min = Some(cached_rs_min.map_or(rs, |m: f64| m.min(rs)));
            if rs < 1.0 {
                cached_rs_breaks += 1;
                debug!(target: "grip::unlearn", "step {steps_run}: cached retain stability {rs:.4}");
            }
        }
    }
    if !net.is_finite() {
        return Err(Error::Diverged {
            step: steps_run,
            message: "non-finite parameters".into(),
        });
    }

    let mut ptc = None;
    if cfg.enforcement == Enforcement::Ptc {
        let t = Instant::now();
        let (corrected, res) = apply_ptc(&net, &cache, &retain.inputs, cfg.lambda, !cfg.ptc_one_shot)
            .map_err(diverged(steps_run))?;
        cost_rep.correction_flops = res.flops;
        cost_rep.correction_s = t.elapsed().as_secs_f64();
        net = corrected;
        ptc = Some(res);
    }
    cost_rep.machinery_flops = cost_rep.build_flops + cost_rep.enforce_flops + cost_rep.correction_flops;
    cost_rep.run_s = t_all.elapsed().as_secs_f64();

    let t = Instant::now();
    let post_trace = SelectionTrace::capture(&net, "post", &eval.ids, &eval.inputs)?;
    let stab = routing_stability(&pre_trace, &post_trace)?;
    let part = |prefix: &str| -> Result<f64> {
        let keep = |id: &str| id.starts_with(prefix);
        Ok(routing_stability(&pre_trace.filter(keep), &post_trace.filter(keep))?.mean)
    };
    let rs_retain = part("retain_test/")?;
    let rs_forget = part("forget_test/")?;
    let rs_cached = cached_stability(&net, &cache, &retain.inputs)?;
    let ft = &task.forget_test;
    let attack = forcing_attack(&net, &ft.ids, &ft.inputs, &ft.labels, &cfg.attack, &pre_trace)?;
    let summary_infeasible = summary.infeasible_rows;
    let report = RunReport {
        config: cfg.clone(),
        task_seed: task.config.seed,
        steps_run,
        stopped_early,
        fa_pre,
        fa_post: split_accuracy(&net, &task.forget_test)?,
        ra_pre,
        ra_post: split_accuracy(&net, &task.retain_test)?,
        forget_train_acc_pre,
        forget_train_acc_post: split_accuracy(&net, forget)?,
        rs_per_layer: stab.per_layer,
        rs: stab.mean,
        rs_retain,
        rs_forget,
        rs_cached,
        cached_rs_min,
        cached_rs_breaks,
        attack,
        loss_curve,
        enforcement: summary,
        ptc,
        cost: CostReport {
            eval_s: t.elapsed().as_secs_f64(),
            ..cost_rep
        },
    };
    if summary_infeasible > 0 {
        warn!(
            target: "grip::unlearn",
            "{}/{} seed={}: {summary_infeasible} router-row updates left infeasible after the Kaczmarz budget",
            cfg.objective,
            cfg.enforcement,
            cfg.seed
        );
    }
    info!(
        target: "grip::unlearn",
        "{}/{} seed={} steps={} FA {:.3}->{:.3} RA {:.3}->{:.3} RS {:.3}",
        cfg.objective,
        cfg.enforcement,
        cfg.seed,
        steps_run,
        report.fa_pre,
        report.fa_post,
        report.ra_pre,
        report.ra_post,
        report.rs
    );
    Ok((net, report))
}

/// Reports a non-finite intermediate as a diverged run.
fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(message) => Error::Diverged { step, message },
        other => other,
    }
}

/// Thresholds swept by [`sweep_eps`] by default.
pub const SWEEP_EPS: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    pub rs: f64,
    pub rs_retain: f64,
    pub rs_cached: f64,
    pub fa: f64,
    pub ra: f64,
    pub empty_nullspaces: Vec<(usize, usize)>,
}

/// Expert-specific runs at each threshold in `eps_values`.
pub fn sweep_eps(
    net_pre: &MoENetwork,
    task: &SyntheticTask,
    base: &UnlearnConfig,
    eps_values: &[f64],
) -> Result<Vec<SweepRow>> {
    eps_values
        .iter()
        .map(|&eps| {
            let cfg = UnlearnConfig {
                enforcement: Enforcement::ExpertSpecific,
                eps,
                ..base.clone()
            };
            let (_, r) = unlearn_run(net_pre, task, &cfg, None)?;
            Ok(SweepRow {
                eps,
                rs: r.rs,
                rs_retain: r.rs_retain,
                rs_cached: r.rs_cached,
                fa: r.fa_post,
                ra: r.ra_post,
                empty_nullspaces: r.enforcement.empty_nullspaces,
            })
        })
        .collect()
}
