//! Training-time constraint enforcement on router update rows.
//!
//! Phase 1 projects a row onto the expert's equality null space; phase 2
//! runs Randomized Kaczmarz over the violated selection-margin half-spaces,
//! sampling constraint `i` with probability `‖x_i‖² / ‖A‖_F²`.
//!
//! Constraints bound the router *update* `ΔΘ_j`, not the raw gradient: a row
//! `u` is feasible when `u · x_i ≤ τ_{i,j} − slack` for every retain input
//! that did not select expert `j`. [`constrain_router_gradients`] converts
//! gradients to updates (`u = −η g`) and back.

use log::{debug, warn};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintBank, ExpertConstraintSet, RetainCache};
use crate::cost;
use crate::error::{Error, Result};
use crate::moe::{topk_select, SelectionSet};
use crate::numerics::{axpy, dot, norm, norm_sq, nullspace_projector_scaled, Matrix, Projector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KaczmarzConfig {
    /// Iteration cap (per initially violated constraint when
    /// `cap_per_violation` is set).
    pub k_max: usize,
    pub cap_per_violation: bool,
    /// Subtracted from each margin to keep updates strictly inside.
    pub margin_slack: f64,
    /// Samples between full feasibility scans.
    pub convergence_check_every: usize,
    /// Largest residual counted as satisfied by a feasibility scan.
    pub feasibility_tol: f64,
    pub rng_seed: u64,
    /// Estimate the scaled condition number of the violated system.
    pub report_condition: bool,
}

impl Default for KaczmarzConfig {
    fn default() -> Self {
        Self {
            k_max: 100,
            cap_per_violation: true,
            margin_slack: 1e-6,
            convergence_check_every: 25,
            feasibility_tol: 1e-10,
            rng_seed: 0,
            report_condition: false,
        }
    }
}

impl KaczmarzConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::contract("k_max must be >= 1"));
        }
        if !(self.margin_slack >= 0.0) {
            return Err(Error::contract("margin_slack must be >= 0"));
        }
        if self.convergence_check_every == 0 {
            return Err(Error::contract("convergence_check_every must be >= 1"));
        }
        Ok(())
    }
}

/// Diagnostics of one Kaczmarz run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnforcementStats {
    pub layer: usize,
    pub expert: usize,
    pub iterations: usize,
    /// Samples that triggered a projection.
    pub projections: usize,
    pub initial_max_violation: f64,
    pub final_max_violation: f64,
    pub initially_violated: usize,
    pub finally_violated: usize,
    pub feasible: bool,
    /// Times each inequality row was sampled, aligned with `ineq`.
    pub sampled: Vec<u32>,
    /// Scaled condition number `‖A‖_F · ‖A⁺‖₂` of the initially violated
    /// rows, when requested.
    pub condition: Option<f64>,
}

/// Margin bound used by the half-space `u · x ≤ bound`.
///
/// Nonnegative margins keep the zero update feasible; negative margins
/// (already-crossed pairs after drift) ask for a restoring update.
pub fn margin_bound(margin: f64, slack: f64) -> f64 {
    if margin >= 0.0 {
        (margin - slack).max(0.0)
    } else {
        margin - slack
    }
}

/// Phase 1: `P_j u`.
pub fn project_equality(row: &[f64], cs: &ExpertConstraintSet) -> Vec<f64> {
    cs.eq_projector.apply(row)
}

fn violations(u: &[f64], cs: &ExpertConstraintSet, bounds: &[f64]) -> (f64, usize, Vec<f64>) {
    let v: Vec<f64> = cs
        .ineq
        .iter()
        .zip(bounds)
        .map(|(r, b)| dot(u, &r.row) - b)
        .collect();
    cost::add((2 * u.len() * cs.ineq.len()) as u64);
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (max, v.iter().filter(|&&x| x > 0.0).count(), v)
}

/// Phase 2: Randomized Kaczmarz over the inequality half-spaces.
///
/// Returns the adjusted row and statistics. Running out of iterations with
/// violations left is not an error; `stats.feasible` is false and the
/// caller decides what to do.
pub fn kaczmarz_halfspace(
    row: &[f64],
    cs: &ExpertConstraintSet,
    cfg: &KaczmarzConfig,
) -> Result<(Vec<f64>, EnforcementStats)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    kaczmarz_with_rng(row, cs, cfg, &mut rng)
}

fn kaczmarz_with_rng(
    row: &[f64],
    cs: &ExpertConstraintSet,
    cfg: &KaczmarzConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, EnforcementStats)> {
    cfg.validate()?;
    if row.len() != cs.dim() {
        return Err(Error::contract(format!(
            "row has {} entries, constraints are {}-dimensional",
            row.len(),
            cs.dim()
        )));
    }
    let mut u = row.to_vec();
    let bounds: Vec<f64> = cs
        .ineq
        .iter()
        .map(|r| margin_bound(r.margin, cfg.margin_slack))
        .collect();
    let mut stats = EnforcementStats {
        layer: cs.layer,
        expert: cs.expert,
        sampled: vec![0; cs.ineq.len()],
        ..Default::default()
    };
    if cs.ineq.is_empty() {
        stats.feasible = true;
        return Ok((u, stats));
    }

    let (max0, nviol0, v0) = violations(&u, cs, &bounds);
    stats.initial_max_violation = max0.max(0.0);
    stats.initially_violated = nviol0;
    if max0 <= cfg.feasibility_tol {
        stats.final_max_violation = max0.max(0.0);
        stats.finally_violated = nviol0;
        stats.feasible = true;
        return Ok((u, stats));
    }
    if cfg.report_condition {
        let active: Vec<&[f64]> = cs
            .ineq
            .iter()
            .zip(&v0)
            .filter(|(_, &v)| v > 0.0)
            .map(|(r, _)| r.row.as_slice())
            .collect();
        stats.condition = Some(scaled_condition(&active));
    }

    let weights: Vec<f64> = cs.ineq.iter().map(|r| r.weight).collect();
    let sampler = WeightedIndex::new(&weights)
        .map_err(|e| Error::contract(format!("invalid sampling weights: {e}")))?;
    let cap = if cfg.cap_per_violation {
        cfg.k_max * nviol0.max(1)
    } else {
        cfg.k_max
    };

    let d = u.len();
    let mut last_max = max0;
    while stats.iterations < cap {
        let i = sampler.sample(rng);
        stats.sampled[i] += 1;
        let r = &cs.ineq[i];
        let v = dot(&u, &r.row) - bounds[i];
        if v > 0.0 {
            axpy(-v / r.weight, &r.row, &mut u);
            stats.projections += 1;
        }
        stats.iterations += 1;
        if stats.iterations.is_multiple_of(cfg.convergence_check_every) {
            let (m, _, _) = violations(&u, cs, &bounds);
            last_max = m;
            if m <= cfg.feasibility_tol {
                break;
            }
        }
    }
    cost::add((4 * d * stats.iterations) as u64);

    let (m, n, _) = if stats.iterations.is_multiple_of(cfg.convergence_check_every) {
        let (_, n, v) = violations(&u, cs, &bounds);
        (last_max, n, v)
    } else {
        violations(&u, cs, &bounds)
    };
    stats.final_max_violation = m.max(0.0);
    stats.finally_violated = n;
    stats.feasible = m <= cfg.feasibility_tol;
    Ok((u, stats))
}

/// Scaled condition number `‖A‖_F / σ_min⁺(A)` by power iteration on the
/// smaller Gram matrix (smallest eigenvalue via a shifted iteration).
pub fn scaled_condition(rows: &[&[f64]]) -> f64 {
    if rows.is_empty() {
        return 1.0;
    }
    let n = rows.len();
    let fro2: f64 = rows.iter().map(|r| norm_sq(r)).sum();
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = dot(rows[i], rows[j]);
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    let lmax = power_iteration(&g, 0.0);
    let lmin = lmax - power_iteration(&g, lmax);
    if lmin <= 1e-14 * lmax {
        f64::INFINITY
    } else {
        (fro2 / lmin).sqrt()
    }
}

/// Dominant eigenvalue of `shift·I − G` (or of `G` when `shift == 0`).
fn power_iteration(g: &Matrix, shift: f64) -> f64 {
    let n = g.rows();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * i as f64).collect();
    let mut lambda = 0.0;
    for _ in 0..500 {
        let mut w = g.matvec(&v).expect("square");
        if shift != 0.0 {
            for (wi, vi) in w.iter_mut().zip(&v) {
                *wi = shift * vi - *wi;
            }
        }
        let nw = norm(&w);
        if nw == 0.0 {
            return 0.0;
        }
        let next = dot(&v, &w) / norm_sq(&v);
        w.iter_mut().for_each(|x| *x /= nw);
        v = w;
        if (next - lambda).abs() <= 1e-12 * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Per-step aggregate of [`EnforcementStats`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub rows: Vec<EnforcementStats>,
    pub infeasible_rows: usize,
    pub total_iterations: usize,
    pub total_projections: usize,
    /// Largest `|u · x_i| / (‖u‖ ‖x_i‖)` over equality inputs after
    /// enforcement.
    pub max_equality_residual: f64,
}

fn row_seed(seed: u64, step: u64, layer: usize, expert: usize) -> u64 {
    // splitmix64 over the tuple
    let mut z = seed
        ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (layer as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ (expert as u64).wrapping_mul(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Constrains every router update row in place: equality projection,
/// Kaczmarz, then one more equality projection.
///
/// `updates[l]` is the `E × d` router update of layer `l`. Each row draws
/// from its own RNG stream keyed by `(seed, step, layer, expert)`.
pub fn constrain_router_updates(
    updates: &mut [Matrix],
    bank: &ConstraintBank,
    cache: &RetainCache,
    cfg: &KaczmarzConfig,
    step: u64,
) -> Result<StepStats> {
    if updates.len() != bank.sets.len() {
        return Err(Error::contract(format!(
            "{} update layers for {} constraint layers",
            updates.len(),
            bank.sets.len()
        )));
    }
    let mut out = StepStats::default();
    for (l, upd) in updates.iter_mut().enumerate() {
        let sets = &bank.sets[l];
        if upd.rows() != sets.len() {
            return Err(Error::contract(format!(
                "layer {l}: {} update rows for {} constraint sets",
                upd.rows(),
                sets.len()
            )));
        }
        for (j, cs) in sets.iter().enumerate() {
            let u0 = project_equality(upd.row(j), cs);
            let mut rng = ChaCha8Rng::seed_from_u64(row_seed(cfg.rng_seed, step, l, j));
            let (u1, stats) = kaczmarz_with_rng(&u0, cs, cfg, &mut rng)?;
            let u2 = project_equality(&u1, cs);
            let resid = equality_residual(&u2, cache, l, &cs.eq_indices);
            out.max_equality_residual = out.max_equality_residual.max(resid);
            upd.row_mut(j).copy_from_slice(&u2);
            if !stats.feasible {
                out.infeasible_rows += 1;
            }
            out.total_iterations += stats.iterations;
            out.total_projections += stats.projections;
            out.rows.push(stats);
        }
    }
    if out.infeasible_rows > 0 {
        debug!(
            target: "grip::enforce",
            "step {step}: {} router rows left infeasible after the Kaczmarz budget",
            out.infeasible_rows
        );
    }
    Ok(out)
}

fn equality_residual(u: &[f64], cache: &RetainCache, layer: usize, idx: &[usize]) -> f64 {
    let nu = norm(u);
    if nu == 0.0 || idx.is_empty() {
        return 0.0;
    }
    let x = &cache.layers[layer].x;
    let d = x.rows();
    let mut worst: f64 = 0.0;
    for &i in idx {
        let mut s = 0.0;
        let mut nx = 0.0;
        for r in 0..d {
            let v = x.get(r, i);
            s += u[r] * v;
            nx += v * v;
        }
        if nx > 0.0 {
            worst = worst.max(s.abs() / (nu * nx.sqrt()));
        }
    }
    cost::add((4 * d * idx.len()) as u64);
    worst
}

/// Gradient-space wrapper: with update `ΔΘ = −lr · g`, constrains the update
/// and rewrites `grads` as the matching constrained gradient.
pub fn constrain_router_gradients(
    grads: &mut [Matrix],
    lr: f64,
    bank: &ConstraintBank,
    cache: &RetainCache,
    cfg: &KaczmarzConfig,
    step: u64,
) -> Result<StepStats> {
    if !(lr > 0.0) {
        return Err(Error::contract("learning rate must be > 0"));
    }
    let mut updates: Vec<Matrix> = grads.iter().map(|g| g.scale(-lr)).collect();
    let stats = constrain_router_updates(&mut updates, bank, cache, cfg, step)?;
    for (g, u) in grads.iter_mut().zip(&updates) {
        *g = u.scale(-1.0 / lr);
    }
    Ok(stats)
}

/// Result of [`guard_selections`] on one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardOutcome {
    pub halvings: u32,
    /// No halving kept the selections, so the update was dropped.
    pub zeroed: bool,
}

/// Default halving budget of [`guard_selections`].
pub const GUARD_MAX_HALVINGS: u32 = 20;

/// Whether column `i` of `scores` still selects `sel`. Strict separation
/// decides directly; exact ties defer to [`topk_select`].
fn selection_holds(scores: &Matrix, i: usize, sel: &SelectionSet, k: usize) -> Result<bool> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for j in 0..scores.rows() {
        let v = scores.get(j, i);
        if sel.contains(j) {
            lo = lo.min(v);
        } else {
            hi = hi.max(v);
        }
    }
    if lo > hi {
        return Ok(true);
    }
    if lo < hi {
        return Ok(false);
    }
    Ok(topk_select(&scores.col(i), k)? == *sel)
}

/// Halves `update` until `theta + update` reproduces every cached retain
/// selection of `layer`, and zeroes it when `max_halvings` halvings do not
/// suffice. Covers what the thresholded null space and a finite Kaczmarz
/// budget leave open.
pub fn guard_selections(
    theta: &Matrix,
    update: &mut Matrix,
    cache: &RetainCache,
    layer: usize,
    max_halvings: u32,
) -> Result<GuardOutcome> {
    let cl = cache
        .layers
        .get(layer)
        .ok_or_else(|| Error::contract(format!("layer {layer} not cached")))?;
    if theta.shape() != update.shape() || theta.cols() != cl.x.rows() {
        return Err(Error::contract(format!(
            "router {:?}, update {:?} and cached inputs {:?} disagree",
            theta.shape(),
            update.shape(),
            cl.x.shape()
        )));
    }
    let keeps_scores = |scores: &Matrix| -> Result<bool> {
        for (i, sel) in cl.selections.iter().enumerate() {
            if !selection_holds(scores, i, sel, cache.k)? {
                return Ok(false);
            }
        }
        Ok(true)
    };
    let keeps = |u: &Matrix| -> Result<bool> { keeps_scores(&theta.add(u)?.matmul(&cl.x)?) };
    // Screen halvings on base + delta / 2^h, one product per call, then
    // confirm on the exact sum before accepting.
    let base = theta.matmul(&cl.x)?;
    let mut delta = update.matmul(&cl.x)?;
    let mut out = GuardOutcome::default();
    while out.halvings < max_halvings && !keeps_scores(&base.add(&delta)?)? {
        *update = update.scale(0.5);
        delta = delta.scale(0.5);
        out.halvings += 1;
    }
    while !keeps(update)? {
        if out.halvings == max_halvings {
            update.as_mut_slice().fill(0.0);
            out.zeroed = true;
            break;
        }
        *update = update.scale(0.5);
        out.halvings += 1;
    }
    Ok(out)
}

/// Layer-wide null-space projectors of the full retain set.
#[derive(Clone, Debug)]
pub struct GlobalProjectors {
    pub projectors: Vec<Projector>,
    pub eps: f64,
}

impl GlobalProjectors {
    pub fn build(cache: &RetainCache, eps: f64) -> Result<Self> {
        Self::build_scaled(cache, eps, false)
    }

    /// `eps` optionally relative to each layer's largest eigenvalue.
    pub fn build_scaled(cache: &RetainCache, eps: f64, relative: bool) -> Result<Self> {
        let projectors = cache
            .layers
            .iter()
            .enumerate()
            .map(|(l, cl)| {
                let p = nullspace_projector_scaled(&cl.x, eps, relative)?;
                if p.is_empty() {
                    warn!(
                        target: "grip::enforce",
                        "empty global null space at layer {l} (eps={eps:e}); router frozen"
                    );
                }
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { projectors, eps })
    }

    pub fn empty_layers(&self) -> Vec<usize> {
        (0..self.projectors.len())
            .filter(|&l| self.projectors[l].is_empty())
            .collect()
    }
}

/// Projects every router row of layer `l` by the layer's global null-space
/// projector. Returns the layers whose null space was empty (their router
/// rows become zero).
pub fn global_nullspace_constrain(
    grads: &mut [Matrix],
    projectors: &GlobalProjectors,
) -> Result<Vec<usize>> {
    if grads.len() != projectors.projectors.len() {
        return Err(Error::contract("gradient and projector layer counts differ"));
    }
    for (g, p) in grads.iter_mut().zip(&projectors.projectors) {
        for j in 0..g.rows() {
            p.apply_in_place(g.row_mut(j));
        }
    }
    Ok(projectors.empty_layers())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{build_expert_constraints, CachedLayer, IneqRow};
    use crate::moe::topk_select;

    fn lone_set(rows: Vec<(Vec<f64>, f64)>) -> ExpertConstraintSet {
        let d = rows[0].0.len();
        ExpertConstraintSet {
            layer: 0,
            expert: 0,
            eq_indices: vec![],
            eq_projector: Projector::identity(d),
            ineq: rows
                .into_iter()
                .enumerate()
                .map(|(i, (row, margin))| IneqRow {
                    index: i,
                    weight: norm_sq(&row),
                    row,
                    margin,
                })
                .collect(),
            empty_nullspace: false,
            dropped_rows: 0,
        }
    }

    fn exact() -> KaczmarzConfig {
        KaczmarzConfig {
            margin_slack: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn parallel_constraint_single_projection() {
        let cs = lone_set(vec![(vec![1.0, 0.0], 0.0)]);
        let (u, st) = kaczmarz_halfspace(&[1.0, 0.0], &cs, &exact()).unwrap();
        assert_eq!(u, vec![0.0, 0.0]);
        assert_eq!(st.projections, 1);
        assert!(st.feasible);
    }

    #[test]
    fn diagonal_constraint_hand_computed() {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let cs = lone_set(vec![(vec![r, r], 0.0)]);
        let (u, st) = kaczmarz_halfspace(&[1.0, 0.0], &cs, &exact()).unwrap();
        assert!((u[0] - 0.5).abs() < 1e-15 && (u[1] + 0.5).abs() < 1e-15);
        assert!(st.final_max_violation <= 1e-15);
    }

    #[test]
    fn interior_point_untouched() {
        let cs = lone_set(vec![(vec![1.0, 0.0], 2.0), (vec![0.0, 1.0], 1.0)]);
        let (u, st) = kaczmarz_halfspace(&[1.0, -3.0], &cs, &exact()).unwrap();
        assert_eq!(u, vec![1.0, -3.0]);
        assert_eq!(st.iterations, 0);
        assert_eq!(st.projections, 0);
    }

    #[test]
    fn equality_projection_examples() {
        let x = Matrix::identity(2);
        let scores = Matrix::from_cols(&[[1.0, 0.0, -1.0], [0.0, 1.0, -1.0]]).unwrap();
        let cache = RetainCache {
            layers: vec![CachedLayer {
                selections: (0..2).map(|i| topk_select(&scores.col(i), 1).unwrap()).collect(),
                x,
                scores,
            }],
            k: 1,
            query_ids: vec!["a".into(), "b".into()],
        };
        let cs = build_expert_constraints(&cache, 0, 0, 1e-2).unwrap();
        let g = project_equality(&[1.0, 1.0], &cs);
        assert!(g[0].abs() < 1e-15 && (g[1] - 1.0).abs() < 1e-15);
        let free = build_expert_constraints(&cache, 0, 2, 1e-2).unwrap();
        assert_eq!(project_equality(&[1.0, 1.0], &free), vec![1.0, 1.0]);
    }

    #[test]
    fn margin_bound_keeps_zero_feasible() {
        assert_eq!(margin_bound(0.0, 1e-6), 0.0);
        assert_eq!(margin_bound(1.0, 0.25), 0.75);
        assert_eq!(margin_bound(-1.0, 0.25), -1.25);
    }

    #[test]
    fn condition_of_orthonormal_rows() {
        let a = [1.0, 0.0, 0.0];
        let b = [0.0, 1.0, 0.0];
        let k = scaled_condition(&[&a, &b]);
        assert!((k - 2f64.sqrt()).abs() < 1e-9, "{k}");
    }

    #[test]
    fn global_projection_examples() {
        let cache = RetainCache {
            layers: vec![CachedLayer {
                x: Matrix::from_cols(&[[1.0, 0.0]]).unwrap(),
                scores: Matrix::zeros(2, 1),
                selections: vec![crate::moe::SelectionSet::new(vec![0])],
            }],
            k: 1,
            query_ids: vec!["a".into()],
        };
        let gp = GlobalProjectors::build(&cache, 1e-2).unwrap();
        let mut g = vec![Matrix::from_rows(&[[2.0, 3.0], [-1.0, 5.0]]).unwrap()];
        let empty = global_nullspace_constrain(&mut g, &gp).unwrap();
        assert!(empty.is_empty());
        assert!(g[0].get(0, 0).abs() < 1e-15 && (g[0].get(0, 1) - 3.0).abs() < 1e-15);

        let full = RetainCache {
            layers: vec![CachedLayer {
                x: Matrix::identity(2),
                scores: Matrix::zeros(2, 2),
                selections: vec![crate::moe::SelectionSet::new(vec![0]); 2],
            }],
            k: 1,
            query_ids: vec!["a".into(), "b".into()],
        };
        let gp = GlobalProjectors::build(&full, 1e-2).unwrap();
        let mut g = vec![Matrix::from_rows(&[[2.0, 3.0], [-1.0, 5.0]]).unwrap()];
        assert_eq!(global_nullspace_constrain(&mut g, &gp).unwrap(), vec![0]);
        assert_eq!(g[0].max_abs(), 0.0);
    }
}
