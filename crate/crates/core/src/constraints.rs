//! Retain-set constraint data: cached representations, per-expert selection
//! partitions, selection margins, and expert-specific equality projectors.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::moe::{forward_pass, MoENetwork, SelectionSet};
use crate::numerics::{norm_sq, nullspace_projector_scaled, Matrix, Projector};

pub const CACHE_MAGIC: &[u8; 8] = b"GRIPCACH";
pub const CACHE_VERSION: u32 = 1;

/// Default eigenvalue threshold for null-space bases.
pub const DEFAULT_EPS: f64 = 1e-2;

/// Capture-time routing state of one layer over the retain set.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedLayer {
    /// `d × N_r` pre-router representations, one column per retain input.
    pub x: Matrix,
    /// `E × N_r` router scores.
    pub scores: Matrix,
    pub selections: Vec<SelectionSet>,
}

/// Per-layer retain representations, scores and selections.
#[derive(Clone, Debug, PartialEq)]
pub struct RetainCache {
    pub layers: Vec<CachedLayer>,
    pub k: usize,
    /// Not persisted; files load with positional ids.
    pub query_ids: Vec<String>,
}

impl RetainCache {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_inputs(&self) -> usize {
        self.query_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.x.rows())
    }

    pub fn num_experts(&self) -> usize {
        self.layers.first().map_or(0, |l| l.scores.rows())
    }

    fn layer(&self, layer: usize) -> Result<&CachedLayer> {
        self.layers.get(layer).ok_or_else(|| {
            Error::contract(format!("layer {layer} out of range ({} cached)", self.layers.len()))
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CACHE_MAGIC);
        w.u32(CACHE_VERSION);
        for v in [
            self.num_layers(),
            self.dim(),
            self.num_inputs(),
            self.num_experts(),
            self.k,
        ] {
            w.u32(v as u32);
        }
        for layer in &self.layers {
            layer.x.as_slice().iter().for_each(|&v| w.f64(v));
            layer.scores.as_slice().iter().for_each(|&v| w.f64(v));
            for s in &layer.selections {
                s.indices().iter().for_each(|&j| w.u32(j as u32));
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "retain cache");
        r.expect_magic(CACHE_MAGIC)?;
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(Error::Format {
                kind: "retain cache",
                message: format!("unsupported version {version}"),
            });
        }
        let nl = r.u32()? as usize;
        let d = r.u32()? as usize;
        let n = r.u32()? as usize;
        let e = r.u32()? as usize;
        let k = r.u32()? as usize;
        r.expect_remaining(nl * (8 * (d * n + e * n) + 4 * n * k))?;
        let mut layers = Vec::with_capacity(nl);
        for _ in 0..nl {
            let x = Matrix::new(d, n, r.f64s(d * n)?)?;
            let scores = Matrix::new(e, n, r.f64s(e * n)?)?;
            let raw = r.u32s(n * k)?;
            let mut selections = Vec::with_capacity(n);
            for chunk in raw.chunks(k.max(1)).take(n) {
                let idx: Vec<usize> = chunk.iter().map(|&j| j as usize).collect();
                let sel = SelectionSet::new(idx.clone());
                if sel.indices() != idx.as_slice() || idx.iter().any(|&j| j >= e) {
                    return Err(Error::Format {
                        kind: "retain cache",
                        message: format!("invalid selection {idx:?}"),
                    });
                }
                selections.push(sel);
            }
            layers.push(CachedLayer {
                x,
                scores,
                selections,
            });
        }
        r.finish()?;
        Ok(Self {
            layers,
            k,
            query_ids: (0..n).map(|i| format!("retain/{i}")).collect(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_file(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&crate::io::read_file(path)?)
    }
}

/// Records, per layer, the pre-router representation, scores and selection
/// of every retain input in one forward pass each.
pub fn capture_retain_cache(
    net: &MoENetwork,
    query_ids: &[String],
    inputs: &[Vec<f64>],
) -> Result<RetainCache> {
    if inputs.is_empty() {
        return Err(Error::contract("retain set is empty"));
    }
    if query_ids.len() != inputs.len() {
        return Err(Error::contract("query ids and retain inputs differ in length"));
    }
    let n = inputs.len();
    let d = net.dim;
    let mut layers: Vec<CachedLayer> = net
        .layers
        .iter()
        .map(|l| CachedLayer {
            x: Matrix::zeros(d, n),
            scores: Matrix::zeros(l.num_experts(), n),
            selections: Vec::with_capacity(n),
        })
        .collect();
    for (i, x) in inputs.iter().enumerate() {
        let fwd = forward_pass(net, x)?;
        for (l, cl) in layers.iter_mut().enumerate() {
            cl.x.set_col(i, &fwd.hidden[l]);
            cl.scores.set_col(i, &fwd.layers[l].scores);
            cl.selections.push(fwd.layers[l].selection.clone());
        }
    }
    Ok(RetainCache {
        layers,
        k: net.layers.first().map_or(0, |l| l.k),
        query_ids: query_ids.to_vec(),
    })
}

/// Splits retain indices into those whose cached selection contains
/// `expert` and the rest.
pub fn partition_by_selection(
    cache: &RetainCache,
    layer: usize,
    expert: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let cl = cache.layer(layer)?;
    if expert >= cl.scores.rows() {
        return Err(Error::contract(format!("expert {expert} out of range")));
    }
    Ok((0..cl.selections.len()).partition(|&i| cl.selections[i].contains(expert)))
}

/// `τ_{i,j} = min_{k ∈ S_i} (s_k − s_j)` for every retain input `i` that did
/// not select `expert`, as `(i, τ)` pairs.
pub fn compute_margins(
    cache: &RetainCache,
    layer: usize,
    expert: usize,
) -> Result<Vec<(usize, f64)>> {
    let cl = cache.layer(layer)?;
    let (_, outside) = partition_by_selection(cache, layer, expert)?;
    Ok(outside
        .into_iter()
        .map(|i| (i, selection_margin(&cl.scores, &cl.selections[i], i, expert)))
        .collect())
}

/// Margin of non-selected `expert` against selection `sel` in score column `i`.
pub fn selection_margin(scores: &Matrix, sel: &SelectionSet, i: usize, expert: usize) -> f64 {
    let sj = scores.get(expert, i);
    sel.indices()
        .iter()
        .map(|&k| scores.get(k, i) - sj)
        .fold(f64::INFINITY, f64::min)
}

/// One inequality constraint `uᵀ row ≤ margin − slack` on a router update row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IneqRow {
    /// Retain index `i`.
    pub index: usize,
    /// Constraint normal: the retain input restricted to the equality
    /// null space, `P x_i`. For `u = P u` this gives `uᵀ row = uᵀ x_i`.
    pub row: Vec<f64>,
    /// Selection margin `τ_{i,j}` (nonnegative at capture time).
    pub margin: f64,
    /// `‖row‖²`.
    pub weight: f64,
}

/// Equality and inequality constraints on one router row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertConstraintSet {
    pub layer: usize,
    pub expert: usize,
    /// `I_{j,l}`: retain inputs that selected this expert.
    pub eq_indices: Vec<usize>,
    /// Projector onto the approximate null space of the selected inputs.
    pub eq_projector: Projector,
    pub ineq: Vec<IneqRow>,
    /// Selected set was nonempty but left no null-space direction.
    pub empty_nullspace: bool,
    /// Inequality rows dropped because they vanish inside the null space.
    pub dropped_rows: usize,
}

impl ExpertConstraintSet {
    pub fn dim(&self) -> usize {
        self.eq_projector.ambient_dim()
    }

    /// Total count of `(i, j)` pairs covered (equality plus inequality).
    pub fn coverage(&self) -> usize {
        self.eq_indices.len() + self.ineq.len() + self.dropped_rows
    }
}

/// Builds the constraint set of `(layer, expert)` from the retain cache.
pub fn build_expert_constraints(
    cache: &RetainCache,
    layer: usize,
    expert: usize,
    eps: f64,
) -> Result<ExpertConstraintSet> {
    build_expert_constraints_scaled(cache, layer, expert, eps, false)
}

/// [`build_expert_constraints`] with `eps` optionally taken relative to the
/// largest eigenvalue of the selected inputs' Gram matrix.
pub fn build_expert_constraints_scaled(
    cache: &RetainCache,
    layer: usize,
    expert: usize,
    eps: f64,
    relative: bool,
) -> Result<ExpertConstraintSet> {
    if !(eps >= 0.0) {
        return Err(Error::contract(format!("eps must be >= 0, got {eps}")));
    }
    let cl = cache.layer(layer)?;
    let d = cl.x.rows();
    let (selected, _) = partition_by_selection(cache, layer, expert)?;
    let eq_projector = if selected.is_empty() {
        Projector::identity(d)
    } else {
        nullspace_projector_scaled(&cl.x.select_cols(&selected), eps, relative)?
    };
    let empty_nullspace = !selected.is_empty() && eq_projector.is_empty();
    if empty_nullspace {
        warn!(
            target: "grip::constraints",
            "empty null space: layer={layer} expert={expert} selected={} eps={eps:e}",
            selected.len()
        );
    }

    let mut ineq = Vec::new();
    let mut dropped_rows = 0;
    for (i, margin) in compute_margins(cache, layer, expert)? {
        let x = cl.x.col(i);
        let row = eq_projector.apply(&x);
        let weight = norm_sq(&row);
        if weight <= 1e-24 * norm_sq(&x).max(f64::MIN_POSITIVE) || weight == 0.0 {
            dropped_rows += 1;
            continue;
        }
        ineq.push(IneqRow {
            index: i,
            row,
            margin,
            weight,
        });
    }
    Ok(ExpertConstraintSet {
        layer,
        expert,
        eq_indices: selected,
        eq_projector,
        ineq,
        empty_nullspace,
        dropped_rows,
    })
}

/// Constraint sets for every `(layer, expert)` pair.
#[derive(Clone, Debug)]
pub struct ConstraintBank {
    /// `sets[l][j]`.
    pub sets: Vec<Vec<ExpertConstraintSet>>,
    pub eps: f64,
}

impl ConstraintBank {
    pub fn build(cache: &RetainCache, eps: f64) -> Result<Self> {
        Self::build_scaled(cache, eps, false)
    }

    /// See [`build_expert_constraints_scaled`].
    pub fn build_scaled(cache: &RetainCache, eps: f64, relative: bool) -> Result<Self> {
        let sets = (0..cache.num_layers())
            .map(|l| {
                (0..cache.num_experts())
                    .map(|j| build_expert_constraints_scaled(cache, l, j, eps, relative))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { sets, eps })
    }

    /// Recomputes every inequality margin from the current routers on the
    /// cached inputs, so the bound covers the cumulative change since
    /// capture instead of a single step.
    pub fn refresh_margins(&mut self, cache: &RetainCache, routers: &[&Matrix]) -> Result<()> {
        if routers.len() != self.sets.len() || cache.num_layers() != self.sets.len() {
            return Err(Error::contract("router, cache and constraint layer counts differ"));
        }
        for (l, sets) in self.sets.iter_mut().enumerate() {
            let cl = &cache.layers[l];
            let scores = routers[l].matmul(&cl.x)?;
            for cs in sets.iter_mut() {
                for r in cs.ineq.iter_mut() {
                    r.margin = selection_margin(&scores, &cl.selections[r.index], r.index, cs.expert);
                }
            }
        }
        Ok(())
    }

    /// `(layer, expert)` pairs whose selected set left no null space.
    pub fn empty_nullspaces(&self) -> Vec<(usize, usize)> {
        self.sets
            .iter()
            .flatten()
            .filter(|c| c.empty_nullspace)
            .map(|c| (c.layer, c.expert))
            .collect()
    }
}
