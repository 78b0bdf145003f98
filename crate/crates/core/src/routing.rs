//! Expert-selection shift: Jaccard routing stability and drift summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{network_forward, MoENetwork, SelectionSet};

/// `|a ∩ b| / |a ∪ b|`, defined as 1 when both sets are empty.
pub fn jaccard(a: &SelectionSet, b: &SelectionSet) -> f64 {
    let inter = a.intersection_len(b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-query, per-layer selections of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub tag: String,
    pub query_ids: Vec<String>,
    /// `selections[q][l]`.
    pub selections: Vec<Vec<SelectionSet>>,
}

impl SelectionTrace {
    pub fn new(
        tag: impl Into<String>,
        query_ids: Vec<String>,
        selections: Vec<Vec<SelectionSet>>,
    ) -> Result<Self> {
        if query_ids.len() != selections.len() {
            return Err(Error::contract(format!(
                "{} query ids for {} selection rows",
                query_ids.len(),
                selections.len()
            )));
        }
        let layers = selections.first().map_or(0, Vec::len);
        let k = selections.first().and_then(|r| r.first()).map_or(0, SelectionSet::len);
        for (id, row) in query_ids.iter().zip(&selections) {
            if row.len() != layers {
                return Err(Error::contract(format!(
                    "query {id} has {} layers, expected {layers}",
                    row.len()
                )));
            }
            if let Some(s) = row.iter().find(|s| s.len() != k) {
                return Err(Error::contract(format!(
                    "query {id} has a selection of size {}, expected {k}",
                    s.len()
                )));
            }
        }
        let unique: BTreeSet<&String> = query_ids.iter().collect();
        if unique.len() != query_ids.len() {
            return Err(Error::contract("duplicate query ids in trace"));
        }
        Ok(Self {
            tag: tag.into(),
            query_ids,
            selections,
        })
    }

    /// Traces `net` on `inputs`.
    pub fn capture(
        net: &MoENetwork,
        tag: impl Into<String>,
        query_ids: &[String],
        inputs: &[Vec<f64>],
    ) -> Result<Self> {
        let selections = inputs
            .iter()
            .map(|x| {
                let (_, trace) = network_forward(net, x)?;
                Ok(trace.into_iter().map(|t| t.selection).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(tag, query_ids.to_vec(), selections)
    }

    pub fn num_layers(&self) -> usize {
        self.selections.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.query_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query_ids.is_empty()
    }

    pub(crate) fn index(&self) -> BTreeMap<&str, usize> {
        self.query_ids
            .iter()
            .enumerate()
            .map(|(i, q)| (q.as_str(), i))
            .collect()
    }

    /// Restricts the trace to queries whose id satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> Self {
        let (ids, sels) = self
            .query_ids
            .iter()
            .zip(&self.selections)
            .filter(|(q, _)| keep(q))
            .map(|(q, s)| (q.clone(), s.clone()))
            .unzip();
        Self {
            tag: self.tag.clone(),
            query_ids: ids,
            selections: sels,
        }
    }

    /// Line-delimited `query_id,layer,i_1,…,i_k` records after a `# tag=` line.
    pub fn to_text(&self) -> String {
        let mut out = format!("# tag={}\n", self.tag);
        for (id, row) in self.query_ids.iter().zip(&self.selections) {
            for (l, s) in row.iter().enumerate() {
                let _ = write!(out, "{id},{l}");
                for j in s.indices() {
                    let _ = write!(out, ",{j}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Format {
            kind: "trace",
            message: format!("line {}: {msg}", line + 1),
        };
        let mut tag = String::new();
        let mut ids: Vec<String> = Vec::new();
        let mut rows: Vec<Vec<SelectionSet>> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(t) = rest.trim().strip_prefix("tag=") {
                    tag = t.to_string();
                }
                continue;
            }
            let mut fields = line.split(',').map(str::trim);
            let id = fields.next().filter(|s| !s.is_empty());
            let id = id.ok_or_else(|| bad(n, "missing query id".into()))?;
            let layer: usize = fields
                .next()
                .ok_or_else(|| bad(n, "missing layer".into()))?
                .parse()
                .map_err(|e| bad(n, format!("layer: {e}")))?;
            let idx = fields
                .map(|f| f.parse::<usize>().map_err(|e| bad(n, format!("expert index: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let sel = SelectionSet::new(idx.clone());
            if sel.indices() != idx.as_slice() {
                return Err(bad(n, "expert indices must be sorted and distinct".into()));
            }
            if ids.last().map(String::as_str) != Some(id) {
                ids.push(id.to_string());
                rows.push(Vec::new());
            }
            let row = rows.last_mut().expect("row pushed");
            if layer != row.len() {
                return Err(bad(n, format!("expected layer {}, found {layer}", row.len())));
            }
            row.push(sel);
        }
        Self::new(tag, ids, rows)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_file(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = crate::io::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Format {
            kind: "trace",
            message: e.to_string(),
        })?;
        Self::from_text(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryJaccard {
    pub query_id: String,
    pub per_layer: Vec<f64>,
}

/// Per-layer routing stability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// `RS_l`: mean over queries of the layer-`l` Jaccard similarity.
    pub per_layer: Vec<f64>,
    /// Mean of `per_layer`.
    pub mean: f64,
    pub queries: Vec<QueryJaccard>,
}

fn align<'a>(
    pre: &'a SelectionTrace,
    post: &'a SelectionTrace,
) -> Result<Vec<(&'a str, &'a [SelectionSet], &'a [SelectionSet])>> {
    if pre.num_layers() != post.num_layers() && !pre.is_empty() && !post.is_empty() {
        return Err(Error::contract(format!(
            "layer count differs: pre {} vs post {}",
            pre.num_layers(),
            post.num_layers()
        )));
    }
    let pi = pre.index();
    let qi = post.index();
    let missing_post: Vec<&str> = pi.keys().filter(|k| !qi.contains_key(*k)).copied().collect();
    let missing_pre: Vec<&str> = qi.keys().filter(|k| !pi.contains_key(*k)).copied().collect();
    if !missing_post.is_empty() || !missing_pre.is_empty() {
        return Err(Error::contract(format!(
            "query sets differ: only in pre {missing_post:?}, only in post {missing_pre:?}"
        )));
    }
    Ok(pi
        .iter()
        .map(|(id, &i)| {
            (
                *id,
                pre.selections[i].as_slice(),
                post.selections[qi[id]].as_slice(),
            )
        })
        .collect())
}

/// Jaccard similarity of pre/post selections, averaged per layer over queries.
pub fn routing_stability(pre: &SelectionTrace, post: &SelectionTrace) -> Result<StabilityReport> {
    let pairs = align(pre, post)?;
    let nl = pre.num_layers().max(post.num_layers());
    let mut per_layer = vec![0.0; nl];
    let mut queries = Vec::with_capacity(pairs.len());
    for (id, a, b) in &pairs {
        let js: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| jaccard(x, y)).collect();
        for (acc, j) in per_layer.iter_mut().zip(&js) {
            *acc += j;
        }
        queries.push(QueryJaccard {
            query_id: id.to_string(),
            per_layer: js,
        });
    }
    let n = pairs.len();
    if n > 0 {
        per_layer.iter_mut().for_each(|v| *v /= n as f64);
    } else {
        per_layer.iter_mut().for_each(|v| *v = 1.0);
    }
    let mean = if nl == 0 {
        1.0
    } else {
        per_layer.iter().sum::<f64>() / nl as f64
    };
    Ok(StabilityReport {
        per_layer,
        mean,
        queries,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDrift {
    pub layer: usize,
    /// Fraction of queries whose selection changed at this layer.
    pub changed_fraction: f64,
    /// Mean number of pre-selected experts no longer selected.
    pub mean_replaced: f64,
    pub stability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub layers: Vec<LayerDrift>,
    /// True when stability never increases with depth.
    pub nonincreasing_stability: bool,
    /// Shallowest layer with any change.
    pub first_drift_layer: Option<usize>,
}

pub fn drift_report(pre: &SelectionTrace, post: &SelectionTrace) -> Result<DriftReport> {
    let pairs = align(pre, post)?;
    let rs = routing_stability(pre, post)?;
    let n = pairs.len().max(1) as f64;
    let layers: Vec<LayerDrift> = (0..rs.per_layer.len())
        .map(|l| {
            let mut changed = 0usize;
            let mut replaced = 0usize;
            for (_, a, b) in &pairs {
                let inter = a[l].intersection_len(&b[l]);
                if a[l] != b[l] {
                    changed += 1;
                }
                replaced += a[l].len() - inter;
            }
            LayerDrift {
                layer: l,
                changed_fraction: changed as f64 / n,
                mean_replaced: replaced as f64 / n,
                stability: rs.per_layer[l],
            }
        })
        .collect();
    let nonincreasing_stability = layers.windows(2).all(|w| w[1].stability <= w[0].stability);
    let first_drift_layer = layers.iter().find(|d| d.changed_fraction > 0.0).map(|d| d.layer);
    Ok(DriftReport {
        layers,
        nonincreasing_stability,
        first_drift_layer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[usize]) -> SelectionSet {
        SelectionSet::new(v.to_vec())
    }

    fn trace(tag: &str, rows: Vec<(&str, Vec<SelectionSet>)>) -> SelectionTrace {
        let (ids, sels): (Vec<String>, Vec<_>) =
            rows.into_iter().map(|(id, r)| (id.to_string(), r)).unzip();
        SelectionTrace::new(tag, ids, sels).unwrap()
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(&s(&[1, 2]), &s(&[1, 2])), 1.0);
        assert_eq!(jaccard(&s(&[1, 2]), &s(&[3, 4])), 0.0);
        assert!((jaccard(&s(&[1, 2]), &s(&[2, 3])) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&s(&[]), &s(&[])), 1.0);
    }

    #[test]
    fn stability_examples() {
        let pre = trace("pre", vec![("a", vec![s(&[1, 2])]), ("b", vec![s(&[1, 2])])]);
        assert_eq!(routing_stability(&pre, &pre).unwrap().per_layer, vec![1.0]);

        let disjoint = trace("post", vec![("a", vec![s(&[3, 4])]), ("b", vec![s(&[0, 5])])]);
        assert_eq!(routing_stability(&pre, &disjoint).unwrap().per_layer, vec![0.0]);

        let post = trace("post", vec![("b", vec![s(&[2, 3])]), ("a", vec![s(&[1, 2])])]);
        let rs = routing_stability(&pre, &post).unwrap();
        assert!((rs.per_layer[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((rs.mean - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mismatched_queries_are_reported() {
        let pre = trace("pre", vec![("a", vec![s(&[1])]), ("b", vec![s(&[1])])]);
        let post = trace("post", vec![("a", vec![s(&[1])]), ("c", vec![s(&[1])])]);
        let err = routing_stability(&pre, &post).unwrap_err().to_string();
        assert!(err.contains("\"b\"") && err.contains("\"c\""), "{err}");
    }

    #[test]
    fn drift_is_local() {
        let row = |l2: &[usize]| vec![s(&[0, 1]), s(&[1, 2]), s(l2), s(&[0, 3])];
        let pre = trace("pre", vec![("a", row(&[2, 3])), ("b", row(&[2, 3]))]);
        let post = trace("post", vec![("a", row(&[2, 3])), ("b", row(&[2, 4]))]);
        let d = drift_report(&pre, &post).unwrap();
        assert_eq!(d.first_drift_layer, Some(2));
        for l in &d.layers {
            let expect = if l.layer == 2 { 0.5 } else { 0.0 };
            assert_eq!(l.changed_fraction, expect);
        }
        assert_eq!(d.layers[2].mean_replaced, 0.5);
        assert!(!d.nonincreasing_stability);

        let same = drift_report(&pre, &pre).unwrap();
        assert!(same.layers.iter().all(|l| l.changed_fraction == 0.0));
        assert_eq!(same.first_drift_layer, None);
    }

    #[test]
    fn monotone_drift_fixture_detected() {
        // layer l changes for the first l queries out of 4
        let ids = ["q0", "q1", "q2", "q3"];
        let pre = trace("pre", ids.iter().map(|q| (*q, vec![s(&[0, 1]); 4])).collect());
        let post = trace(
            "post",
            ids.iter()
                .enumerate()
                .map(|(qi, q)| {
                    let row = (0..4)
                        .map(|l| if qi < l { s(&[2, 3]) } else { s(&[0, 1]) })
                        .collect();
                    (*q, row)
                })
                .collect(),
        );
        let d = drift_report(&pre, &post).unwrap();
        assert!(d.nonincreasing_stability);
        let rs: Vec<f64> = d.layers.iter().map(|l| l.stability).collect();
        assert_eq!(rs, vec![1.0, 0.75, 0.5, 0.25]);
    }

    #[test]
    fn text_round_trip() {
        let t = trace("pre", vec![("x/0", vec![s(&[0, 3]), s(&[1, 2])]), ("x/1", vec![s(&[4, 5]), s(&[0, 7])])]);
        let text = t.to_text();
        assert!(text.contains("x/0,1,1,2\n"));
        assert_eq!(SelectionTrace::from_text(&text).unwrap(), t);
        assert!(SelectionTrace::from_text("a,0,3,1\n").is_err());
        assert!(SelectionTrace::from_text("a,1,0,1\n").is_err());
    }
}
