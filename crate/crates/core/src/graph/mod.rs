//! Discrete-snapshot dynamic graphs: the data model, file formats,
//! chronological splits, negative sampling and the distribution-shift
//! protocols.

mod io;
mod negative;
mod shift;
mod split;

pub use io::{
    load_dataset, load_edgelist, load_features, write_dataset, write_edgelist, write_features,
    DatasetMeta,
};
pub use negative::{sample_negative_edges, sample_non_edges};
pub use shift::{
    apply_attribute_filter, feature_shift_probability, gen_env_synthetic, gen_feature_shift,
    EnvSyntheticParams, FeatureShiftParams, FilteredGraph, ShiftProtocol, SyntheticDataset,
};
pub use split::{chronological_split, EvalSet, SplitSpec};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Feature dimension used when a dataset ships without node features.
pub const DEFAULT_FEATURE_DIM: usize = 32;

/// Undirected edge stored with `u < v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
}

impl Edge {
    /// Canonical form of `{a, b}`. Self-loops are rejected.
    pub fn new(a: usize, b: usize) -> Result<Self> {
        if a == b {
            return Err(Error::Data(format!("self-loop on node {a}")));
        }
        Ok(Self {
            u: a.min(b),
            v: a.max(b),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct AttrEdge {
    pub edge: Edge,
    pub attr: Option<u32>,
}

/// Node features for every snapshot, stored snapshot-major so that
/// [`Features::snapshot`] is a contiguous `N × d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    num_nodes: usize,
    num_snapshots: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Features {
    pub fn zeros(num_nodes: usize, num_snapshots: usize, dim: usize) -> Self {
        Self {
            num_nodes,
            num_snapshots,
            dim,
            data: vec![0.0; num_nodes * num_snapshots * dim],
        }
    }

    /// Seeded standard-normal features.
    pub fn random(num_nodes: usize, num_snapshots: usize, dim: usize, seed: u64) -> Self {
        let mut f = Self::zeros(num_nodes, num_snapshots, dim);
        let mut rng = Rng::new(seed);
        for x in &mut f.data {
            *x = rng.normal();
        }
        f
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_snapshots(&self) -> usize {
        self.num_snapshots
    }

    pub fn snapshot(&self, t: usize) -> &[f64] {
        let n = self.num_nodes * self.dim;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn snapshot_mut(&mut self, t: usize) -> &mut [f64] {
        let n = self.num_nodes * self.dim;
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn row(&self, t: usize, v: usize) -> &[f64] {
        let off = (t * self.num_nodes + v) * self.dim;
        &self.data[off..off + self.dim]
    }

    pub fn row_mut(&mut self, t: usize, v: usize) -> &mut [f64] {
        let off = (t * self.num_nodes + v) * self.dim;
        &mut self.data[off..off + self.dim]
    }

    /// `[self ‖ other]` along the feature axis.
    pub fn concat(&self, other: &Features) -> Result<Features> {
        if self.num_nodes != other.num_nodes || self.num_snapshots != other.num_snapshots {
            return Err(Error::Data("feature blocks cover different graphs".into()));
        }
        let mut out = Features::zeros(self.num_nodes, self.num_snapshots, self.dim + other.dim);
        for t in 0..self.num_snapshots {
            for v in 0..self.num_nodes {
                let row = out.row_mut(t, v);
                row[..self.dim].copy_from_slice(self.row(t, v));
                row[self.dim..].copy_from_slice(other.row(t, v));
            }
        }
        Ok(out)
    }
}

/// Ordered snapshots over a shared node set.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicGraph {
    num_nodes: usize,
    snapshots: Vec<Vec<AttrEdge>>,
    features: Option<Features>,
}

impl DynamicGraph {
    pub fn empty(num_nodes: usize, num_snapshots: usize) -> Self {
        Self {
            num_nodes,
            snapshots: vec![Vec::new(); num_snapshots],
            features: None,
        }
    }

    /// Builds a graph from `(t, u, v, attr)` records. Duplicate edges within
    /// a snapshot collapse to one, keeping the smallest attribute.
    pub fn from_records(
        num_nodes: usize,
        num_snapshots: usize,
        records: impl IntoIterator<Item = (usize, usize, usize, Option<u32>)>,
    ) -> Result<Self> {
        let mut per_t: Vec<BTreeMap<Edge, Option<u32>>> = vec![BTreeMap::new(); num_snapshots];
        for (t, u, v, attr) in records {
            if t >= num_snapshots {
                return Err(Error::Data(format!(
                    "snapshot {t} out of range for {num_snapshots} snapshots"
                )));
            }
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::Data(format!(
                    "edge ({u}, {v}) out of range for {num_nodes} nodes"
                )));
            }
            let e = Edge::new(u, v)?;
            per_t[t]
                .entry(e)
                .and_modify(|a| *a = (*a).min(attr))
                .or_insert(attr);
        }
        let snapshots = per_t
            .into_iter()
            .map(|m| {
                m.into_iter()
                    .map(|(edge, attr)| AttrEdge { edge, attr })
                    .collect()
            })
            .collect();
        Ok(Self {
            num_nodes,
            snapshots,
            features: None,
        })
    }

    pub fn with_features(mut self, features: Features) -> Result<Self> {
        if features.num_nodes != self.num_nodes || features.num_snapshots != self.num_snapshots()
        {
            return Err(Error::Data(format!(
                "features cover {} nodes × {} snapshots, graph has {} × {}",
                features.num_nodes,
                features.num_snapshots,
                self.num_nodes,
                self.num_snapshots()
            )));
        }
        self.features = Some(features);
        Ok(self)
    }

    /// Fills in seeded standard-normal features of dimension
    /// [`DEFAULT_FEATURE_DIM`] when none are present.
    pub fn ensure_features(mut self, seed: u64) -> Self {
        if self.features.is_none() {
            self.features = Some(Features::random(
                self.num_nodes,
                self.num_snapshots(),
                DEFAULT_FEATURE_DIM,
                seed,
            ));
        }
        self
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_snapshots(&self) -> usize {
        self.snapshots.len()
    }

    pub fn features(&self) -> Option<&Features> {
        self.features.as_ref()
    }

    pub fn snapshot(&self, t: usize) -> &[AttrEdge] {
        &self.snapshots[t]
    }

    pub fn edges(&self, t: usize) -> impl Iterator<Item = Edge> + '_ {
        self.snapshots[t].iter().map(|e| e.edge)
    }

    pub fn edge_vec(&self, t: usize) -> Vec<Edge> {
        self.edges(t).collect()
    }

    pub fn num_edges(&self, t: usize) -> usize {
        self.snapshots[t].len()
    }

    pub fn total_edges(&self) -> usize {
        self.snapshots.iter().map(Vec::len).sum()
    }

    pub fn has_edge(&self, t: usize, e: Edge) -> bool {
        self.snapshots[t]
            .binary_search_by(|x| x.edge.cmp(&e))
            .is_ok()
    }

    /// Directed message lists `(src, dst)` with both orientations of every
    /// undirected edge.
    pub fn message_lists(&self, t: usize) -> (Vec<usize>, Vec<usize>) {
        let mut src = Vec::with_capacity(2 * self.num_edges(t));
        let mut dst = Vec::with_capacity(2 * self.num_edges(t));
        for e in self.edges(t) {
            src.push(e.u);
            dst.push(e.v);
            src.push(e.v);
            dst.push(e.u);
        }
        (src, dst)
    }

    /// Same graph with every attribute removed.
    pub fn strip_attributes(&self) -> Self {
        let snapshots = self
            .snapshots
            .iter()
            .map(|s| {
                s.iter()
                    .map(|e| AttrEdge {
                        edge: e.edge,
                        attr: None,
                    })
                    .collect()
            })
            .collect();
        Self {
            num_nodes: self.num_nodes,
            snapshots,
            features: self.features.clone(),
        }
    }

    pub(crate) fn replace_snapshots(&mut self, snapshots: Vec<Vec<AttrEdge>>) {
        debug_assert_eq!(snapshots.len(), self.snapshots.len());
        self.snapshots = snapshots;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_are_canonicalized_and_deduplicated() {
        let g = DynamicGraph::from_records(
            4,
            1,
            [(0, 2, 1, Some(3)), (0, 1, 2, Some(1)), (0, 0, 3, None)],
        )
        .unwrap();
        assert_eq!(g.num_edges(0), 2);
        let first = g.snapshot(0)[1];
        assert_eq!(first.edge, Edge { u: 1, v: 2 });
        assert_eq!(first.attr, Some(1));
        assert!(g.has_edge(0, Edge::new(3, 0).unwrap()));
    }

    #[test]
    fn rejects_self_loops_and_range() {
        assert!(DynamicGraph::from_records(3, 1, [(0, 1, 1, None)]).is_err());
        assert!(DynamicGraph::from_records(3, 1, [(0, 1, 3, None)]).is_err());
        assert!(DynamicGraph::from_records(3, 1, [(1, 0, 1, None)]).is_err());
    }

    #[test]
    fn message_lists_cover_both_directions() {
        let g = DynamicGraph::from_records(3, 1, [(0, 0, 2, None)]).unwrap();
        let (src, dst) = g.message_lists(0);
        assert_eq!(src, vec![0, 2]);
        assert_eq!(dst, vec![2, 0]);
    }

    #[test]
    fn feature_concat_doubles_dim() {
        let a = Features::random(3, 2, 4, 1);
        let b = Features::random(3, 2, 4, 2);
        let c = a.concat(&b).unwrap();
        assert_eq!(c.dim(), 8);
        assert_eq!(&c.row(1, 2)[..4], a.row(1, 2));
        assert_eq!(&c.row(1, 2)[4..], b.row(1, 2));
    }
}
