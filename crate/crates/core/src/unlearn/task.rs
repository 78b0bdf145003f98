//! Synthetic cluster classification task with a forget partition.
//!
//! Retain clusters sit at `a·m ± s·b_c` for orthonormal directions `m`,
//! `b_0 … b_{C-1}`; with two clusters per class the pair is antipodal, which
//! a linear readout cannot separate, so retain accuracy depends on routing.
//! Each forget cluster copies a retain center, shifts it by `t·f` along a
//! dedicated direction `f`, and carries a different label, so the knowledge
//! has to live in experts that respond to `f`. Noise is Gaussian with a
//! geometrically decaying spectrum in a random basis whose leading direction
//! is `f`, so retain and forget inputs overlap along it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, norm, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub dim: usize,
    pub classes: usize,
    pub retain_train: usize,
    pub forget_train: usize,
    pub retain_test: usize,
    pub forget_test: usize,
    pub forget_clusters: usize,
    /// 1 (at `+s·b_c`) or 2 (at `±s·b_c`).
    pub clusters_per_class: usize,
    /// Length `s` of each class offset.
    pub center_scale: f64,
    /// Length `t` of the forget shift.
    pub forget_shift: f64,
    /// Length `a` of the offset shared by every cluster.
    pub mean_offset: f64,
    /// Standard deviation along the leading noise direction.
    pub noise_scale: f64,
    /// Ratio between consecutive noise standard deviations.
    pub noise_decay: f64,
    /// Use the forget direction as the leading noise direction, so retain
    /// data varies along it.
    pub noise_along_forget: bool,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            classes: 8,
            retain_train: 64,
            forget_train: 32,
            retain_test: 512,
            forget_test: 32,
            forget_clusters: 4,
            clusters_per_class: 2,
            center_scale: 3.0,
            forget_shift: 3.5,
            mean_offset: 2.0,
            noise_scale: 0.5,
            noise_decay: 0.75,
            noise_along_forget: true,
            seed: 0,
        }
    }
}

impl TaskConfig {
    /// `sqrt(E‖noise‖²)`.
    pub fn radius(&self) -> f64 {
        (0..self.dim)
            .map(|i| (self.noise_scale * self.noise_decay.powi(i as i32)).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, n) in [
            ("retain_train", self.retain_train),
            ("forget_train", self.forget_train),
            ("retain_test", self.retain_test),
            ("forget_test", self.forget_test),
        ] {
            if n < 8 {
                return Err(Error::contract(format!("{name} must be >= 8, got {n}")));
            }
        }
        if self.classes < 2 {
            return Err(Error::contract("need at least 2 classes"));
        }
        if !(1..=2).contains(&self.clusters_per_class) {
            return Err(Error::contract("clusters_per_class must be 1 or 2"));
        }
        let retain_clusters = self.classes * self.clusters_per_class;
        if self.forget_clusters == 0 || self.forget_clusters > retain_clusters {
            return Err(Error::contract(format!(
                "forget_clusters must be in 1..={retain_clusters}"
            )));
        }
        if self.dim < self.classes + 2 {
            return Err(Error::contract(format!(
                "dim {} too small for {} classes (need classes + 2)",
                self.dim, self.classes
            )));
        }
        if !(self.noise_scale > 0.0 && self.noise_decay > 0.0 && self.noise_decay <= 1.0) {
            return Err(Error::contract("noise_scale must be > 0 and noise_decay in (0, 1]"));
        }
        if !(self.center_scale > 0.0 && self.forget_shift > 0.0 && self.mean_offset >= 0.0) {
            return Err(Error::contract("center_scale and forget_shift must be > 0"));
        }
        Ok(())
    }
}

/// Inputs, labels and stable query ids of one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub ids: Vec<String>,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Concatenation of `self` and `other`.
    pub fn concat(&self, other: &Split) -> Split {
        let mut out = self.clone();
        out.ids.extend(other.ids.iter().cloned());
        out.inputs.extend(other.inputs.iter().cloned());
        out.labels.extend(other.labels.iter().copied());
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub retain_train: Split,
    pub forget_train: Split,
    pub retain_test: Split,
    pub forget_test: Split,
    pub retain_centers: Vec<Vec<f64>>,
    /// Class of each retain center.
    pub retain_classes: Vec<usize>,
    pub forget_centers: Vec<Vec<f64>>,
    /// Retain center each forget cluster was copied from.
    pub forget_parents: Vec<usize>,
    pub forget_labels: Vec<usize>,
    pub forget_direction: Vec<f64>,
}

impl SyntheticTask {
    /// Smallest distance between any two cluster centers divided by the
    /// noise radius.
    pub fn separation_ratio(&self) -> f64 {
        let all: Vec<&Vec<f64>> = self.retain_centers.iter().chain(&self.forget_centers).collect();
        let mut best = f64::INFINITY;
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let mut diff = all[i].clone();
                axpy(-1.0, all[j], &mut diff);
                best = best.min(norm(&diff));
            }
        }
        best / self.config.radius()
    }

    /// Retain and forget training inputs with labels, retain first.
    pub fn train_union(&self) -> Split {
        self.retain_train.concat(&self.forget_train)
    }

    /// Held-out retain and forget queries, the routing evaluation set.
    pub fn eval_set(&self) -> Split {
        self.retain_test.concat(&self.forget_test)
    }
}

/// `n` orthonormal vectors in `ℝ^d` by Gram–Schmidt on Gaussian draws,
/// starting from the unit vectors in `first`.
fn orthonormal(rng: &mut ChaCha8Rng, d: usize, n: usize, first: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = first.to_vec();
    while out.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for q in &out {
                let c = dot(&v, q);
                axpy(-c, q, &mut v);
            }
        }
        let nv = norm(&v);
        if nv > 1e-8 {
            v.iter_mut().for_each(|x| *x /= nv);
            out.push(v);
        }
    }
    out
}

/// Deterministic task for `cfg.seed`.
pub fn generate_task(cfg: &TaskConfig) -> Result<SyntheticTask> {
    cfg.validate()?;
    let d = cfg.dim;
    let c = cfg.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let dirs = orthonormal(&mut rng, d, c + 2, &[]);
    let m = &dirs[0];
    let f = dirs[c + 1].clone();
    let nrc = c * cfg.clusters_per_class;
    let retain_classes: Vec<usize> = (0..nrc).map(|q| q % c).collect();
    let retain_centers: Vec<Vec<f64>> = (0..nrc)
        .map(|q| {
            let sign = if q < c { 1.0 } else { -1.0 };
            let mut v: Vec<f64> = m.iter().map(|x| cfg.mean_offset * x).collect();
            axpy(sign * cfg.center_scale, &dirs[1 + q % c], &mut v);
            v
        })
        .collect();

    let mut parents: Vec<usize> = (0..nrc).collect();
    parents.shuffle(&mut rng);
    parents.truncate(cfg.forget_clusters);
    let forget_labels: Vec<usize> = parents
        .iter()
        .map(|&p| (retain_classes[p] + 1 + rng.random_range(0..c - 1)) % c)
        .collect();
    let forget_centers: Vec<Vec<f64>> = parents
        .iter()
        .map(|&p| {
            let mut v = retain_centers[p].clone();
            axpy(cfg.forget_shift, &f, &mut v);
            v
        })
        .collect();

    let lead: &[Vec<f64>] = if cfg.noise_along_forget { std::slice::from_ref(&f) } else { &[] };
    let noise_basis = Matrix::from_cols(&orthonormal(&mut rng, d, d, lead))?;
    let sigmas: Vec<f64> = (0..d)
        .map(|i| cfg.noise_scale * cfg.noise_decay.powi(i as i32))
        .collect();
    let sample = |center: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        let z: Vec<f64> = sigmas
            .iter()
            .map(|s| {
                let g: f64 = StandardNormal.sample(rng);
                s * g
            })
            .collect();
        let mut x = noise_basis.matvec(&z).expect("square basis");
        axpy(1.0, center, &mut x);
        x
    };

    let make = |name: &str, n: usize, forget: bool, rng: &mut ChaCha8Rng| -> Split {
        let mut split = Split {
            ids: Vec::with_capacity(n),
            inputs: Vec::with_capacity(n),
            labels: Vec::with_capacity(n),
        };
        let clusters = if forget { cfg.forget_clusters } else { nrc };
        for i in 0..n {
            let cl = i % clusters;
            let (center, label) = if forget {
                (&forget_centers[cl], forget_labels[cl])
            } else {
                (&retain_centers[cl], retain_classes[cl])
            };
            split.ids.push(format!("{name}/{i}"));
            split.inputs.push(sample(center, rng));
            split.labels.push(label);
        }
        split
    };
    let retain_train = make("retain_train", cfg.retain_train, false, &mut rng);
    let forget_train = make("forget_train", cfg.forget_train, true, &mut rng);
    let retain_test = make("retain_test", cfg.retain_test, false, &mut rng);
    let forget_test = make("forget_test", cfg.forget_test, true, &mut rng);

    Ok(SyntheticTask {
        config: cfg.clone(),
        retain_train,
        forget_train,
        retain_test,
        forget_test,
        retain_centers,
        retain_classes,
        forget_centers,
        forget_parents: parents,
        forget_labels,
        forget_direction: f,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_task() {
        let cfg = TaskConfig::default();
        assert_eq!(generate_task(&cfg).unwrap(), generate_task(&cfg).unwrap());
        let other = TaskConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate_task(&cfg).unwrap(), generate_task(&other).unwrap());
    }

    #[test]
    fn clusters_are_separated() {
        let t = generate_task(&TaskConfig::default()).unwrap();
        assert!(t.separation_ratio() >= 4.0, "{}", t.separation_ratio());
    }

    #[test]
    fn forget_labels_differ_from_parents() {
        for seed in 0..20 {
            let t = generate_task(&TaskConfig { seed, ..Default::default() }).unwrap();
            for (&p, y) in t.forget_parents.iter().zip(&t.forget_labels) {
                assert_ne!(&t.retain_classes[p], y);
            }
        }
    }

    #[test]
    fn splits_have_requested_sizes_and_unique_ids() {
        let t = generate_task(&TaskConfig::default()).unwrap();
        assert_eq!(t.retain_train.len(), 64);
        assert_eq!(t.retain_test.len(), 512);
        assert_eq!(t.forget_test.len(), 32);
        let all = t.train_union().concat(&t.eval_set());
        let ids: std::collections::BTreeSet<_> = all.ids.iter().collect();
        assert_eq!(ids.len(), all.len());
    }

    #[test]
    fn tiny_splits_rejected() {
        let cfg = TaskConfig { forget_test: 4, ..Default::default() };
        assert!(generate_task(&cfg).is_err());
    }
}
