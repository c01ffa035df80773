//! Distribution-shift protocols.
//!
//! * Attribute filter: edges of one attribute are withheld from training
//!   and validation and only reappear at test time.
//! * Feature shift: node features are augmented with embeddings fitted to a
//!   mix of true future links and non-links, with the mixing probability
//!   `p(t) = clip(p̄ + σ·cos t, 0, 1)` lower at test time than in training.
//! * Environment synthetic: `K` feature channels, some stable over time and
//!   some heavily perturbed, each inducing its own similarity links; the
//!   last channel's links are held out until testing.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::{AttrEdge, DynamicGraph, Edge, Features, DEFAULT_FEATURE_DIM};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::sigmoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShiftProtocol {
    AttributeFilter { attribute: u32 },
    FeatureShift(FeatureShiftParams),
    EnvSynthetic(EnvSyntheticParams),
}

impl ShiftProtocol {
    pub fn validate(&self) -> Result<()> {
        match self {
            ShiftProtocol::AttributeFilter { .. } => Ok(()),
            ShiftProtocol::FeatureShift(p) => p.validate(),
            ShiftProtocol::EnvSynthetic(p) => p.validate(),
        }
    }
}

fn check_unit(name: &str, x: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Config(format!("{name} = {x} must lie in [0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureShiftParams {
    /// Mean link-sampling probability for training and validation features.
    pub p_bar: f64,
    pub sigma: f64,
    /// Same, for the features that feed test-time predictions.
    pub p_bar_test: f64,
    pub sigma_test: f64,
    /// First test snapshot. Features at `t` are fitted with the test
    /// probability when `t + 1 >= test_start`. `None` uses the training
    /// probability everywhere.
    pub test_start: Option<usize>,
    pub iters: usize,
    pub lr: f64,
}

impl Default for FeatureShiftParams {
    fn default() -> Self {
        Self {
            p_bar: 0.4,
            sigma: 0.05,
            p_bar_test: 0.1,
            sigma_test: 0.0,
            test_start: None,
            iters: 200,
            lr: 0.05,
        }
    }
}

impl FeatureShiftParams {
    pub fn validate(&self) -> Result<()> {
        check_unit("p_bar", self.p_bar)?;
        check_unit("p_bar_test", self.p_bar_test)?;
        if self.sigma < 0.0 || self.sigma_test < 0.0 {
            return Err(Error::Config("sigma must be non-negative".into()));
        }
        Ok(())
    }

    fn probability(&self, t: usize) -> f64 {
        match self.test_start {
            Some(s) if t + 1 >= s => feature_shift_probability(self.p_bar_test, self.sigma_test, t),
            _ => feature_shift_probability(self.p_bar, self.sigma, t),
        }
    }
}

/// `clip(p̄ + σ·cos t, 0, 1)`.
pub fn feature_shift_probability(p_bar: f64, sigma: f64, t: usize) -> f64 {
    (p_bar + sigma * (t as f64).cos()).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSyntheticParams {
    pub num_nodes: usize,
    pub num_snapshots: usize,
    pub channels: usize,
    /// Fraction of channels whose features are only slightly perturbed.
    pub sigma_e: f64,
    /// Fraction of the held-out channel's links injected into each test
    /// snapshot.
    pub q_bar: f64,
    pub channel_dim: usize,
    /// Links per node and channel (top-m cosine neighbours).
    pub neighbors: usize,
    pub small_noise: f64,
    pub large_noise: f64,
    /// Trailing snapshots that receive the held-out links.
    pub test_snapshots: usize,
}

impl Default for EnvSyntheticParams {
    fn default() -> Self {
        Self {
            num_nodes: 400,
            num_snapshots: 10,
            channels: 5,
            sigma_e: 0.6,
            q_bar: 0.8,
            channel_dim: 8,
            neighbors: 3,
            small_noise: 0.1,
            large_noise: 1.0,
            test_snapshots: 2,
        }
    }
}

impl EnvSyntheticParams {
    pub fn validate(&self) -> Result<()> {
        check_unit("sigma_e", self.sigma_e)?;
        check_unit("q_bar", self.q_bar)?;
        if self.channels < 2 {
            return Err(Error::Config("env-synthetic needs at least 2 channels".into()));
        }
        if self.num_nodes < 4 {
            return Err(Error::Config("env-synthetic needs at least 4 nodes".into()));
        }
        if self.neighbors == 0 || self.neighbors >= self.num_nodes {
            return Err(Error::Config("neighbors must lie in [1, num_nodes)".into()));
        }
        if self.test_snapshots == 0 || self.test_snapshots >= self.num_snapshots {
            return Err(Error::Config("test_snapshots must lie in [1, num_snapshots)".into()));
        }
        if self.channel_dim == 0 {
            return Err(Error::Config("channel_dim must be positive".into()));
        }
        Ok(())
    }

    /// Number of slightly perturbed (invariant) channels: `round(σ_e·K)`.
    pub fn num_invariant(&self) -> usize {
        (self.sigma_e * self.channels as f64).round() as usize
    }
}

/// Training view with one attribute removed, plus the removed edges.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredGraph {
    pub train_view: DynamicGraph,
    pub ood_edges: Vec<Vec<Edge>>,
}

/// Removes every edge carrying `attribute`. The remaining graph has its
/// attributes stripped; the removed edges are returned per snapshot.
pub fn apply_attribute_filter(g: &DynamicGraph, attribute: u32) -> FilteredGraph {
    let mut kept = Vec::with_capacity(g.num_snapshots());
    let mut ood = Vec::with_capacity(g.num_snapshots());
    for t in 0..g.num_snapshots() {
        let (out, keep): (Vec<AttrEdge>, Vec<AttrEdge>) =
            g.snapshot(t).iter().partition(|e| e.attr == Some(attribute));
        ood.push(out.into_iter().map(|e| e.edge).collect::<Vec<_>>());
        kept.push(keep);
    }
    if ood.iter().all(Vec::is_empty) {
        log::warn!("attribute {attribute} does not occur in the data; nothing withheld");
    }
    let mut train_view = g.clone();
    train_view.replace_snapshots(kept);
    FilteredGraph {
        train_view: train_view.strip_attributes(),
        ood_edges: ood,
    }
}

/// Appends fitted shift features to the node features of `g`.
///
/// For each snapshot `t`, `round(p(t)·|E^{t+1}|)` true links of snapshot
/// `t + 1` and `round((1 − p(t))·|E^{t+1}|)` non-links are sampled, and
/// `X′ᵗ` (same width as the base features) is fitted by gradient descent
/// on the summed logistic loss of `σ(x′_u · x′_v)` against those labels.
/// The last snapshot has no successor and is fitted to its own links.
/// Graphs without features get seeded standard-normal base features.
pub fn gen_feature_shift(g: &DynamicGraph, params: &FeatureShiftParams, seed: u64) -> Result<DynamicGraph> {
    params.validate()?;
    let t_count = g.num_snapshots();
    if t_count < 2 {
        return Err(Error::Data("feature shift needs at least 2 snapshots".into()));
    }
    let base = match g.features() {
        Some(f) => f.clone(),
        None => Features::random(g.num_nodes(), t_count, DEFAULT_FEATURE_DIM, derive_seed(seed, 0)),
    };
    let n = g.num_nodes();
    let d = base.dim();
    let mut shifted = Features::zeros(n, t_count, d);
    for t in 0..t_count {
        let target = (t + 1).min(t_count - 1);
        let edges = g.edge_vec(target);
        let p = params.probability(t);
        let mut rng = Rng::derive(seed, 1 + t as u64);
        let n_pos = (p * edges.len() as f64).round() as usize;
        let n_neg = ((1.0 - p) * edges.len() as f64).round() as usize;
        let mut pairs: Vec<(Edge, f64)> = rng
            .sample_indices(edges.len(), n_pos)
            .into_iter()
            .map(|i| (edges[i], 1.0))
            .collect();
        let exclude: HashSet<Edge> = edges.iter().copied().collect();
        let total = n * (n - 1) / 2 - exclude.len();
        let negs = super::sample_non_edges(n, &exclude, n_neg.min(total), &mut rng)?;
        pairs.extend(negs.into_iter().map(|e| (e, 0.0)));

        let x = shifted.snapshot_mut(t);
        for v in x.iter_mut() {
            *v = 0.1 * rng.normal();
        }
        fit_logistic_embedding(x, d, &pairs, params.iters, params.lr);
    }
    let feats = base.concat(&shifted)?;
    g.clone().with_features(feats)
}

fn fit_logistic_embedding(x: &mut [f64], d: usize, pairs: &[(Edge, f64)], iters: usize, lr: f64) {
    let mut grad = vec![0.0; x.len()];
    for _ in 0..iters {
        grad.fill(0.0);
        for &(e, y) in pairs {
            let (u, v) = (e.u * d, e.v * d);
            let s: f64 = (0..d).map(|j| x[u + j] * x[v + j]).sum();
            let c = sigmoid(s) - y;
            for j in 0..d {
                grad[u + j] += c * x[v + j];
                grad[v + j] += c * x[u + j];
            }
        }
        for (w, g) in x.iter_mut().zip(&grad) {
            *w -= lr * g;
        }
    }
}

/// Output of [`gen_env_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// Edges carry the index of the channel that generated them; the held
    /// out channel is `channels − 1`.
    pub graph: DynamicGraph,
    pub invariant_channels: Vec<usize>,
    pub shifted_attribute: u32,
}

/// Multi-channel synthetic dynamic graph with known invariant channels.
///
/// Each channel `k` has a mean `μ_k ~ N(0, I)`; node `v` gets a base
/// vector `μ_k + N(0, I)`. At every snapshot the first `round(σ_e·K)`
/// channels add noise of std `small_noise`, the others `large_noise`.
/// Per channel, each node links to its `neighbors` most cosine-similar
/// nodes. Links of the last channel are absent from training and
/// validation snapshots; in test snapshots a `q̄` fraction of them (those
/// not already produced by another channel) is injected with attribute
/// `K − 1`. Node features are the channel blocks concatenated.
pub fn gen_env_synthetic(params: &EnvSyntheticParams, seed: u64) -> Result<SyntheticDataset> {
    params.validate()?;
    let (n, t_count, k_count, dc) = (
        params.num_nodes,
        params.num_snapshots,
        params.channels,
        params.channel_dim,
    );
    let n_inv = params.num_invariant();
    let test_start = t_count - params.test_snapshots;

    let mut rng = Rng::derive(seed, 0);
    let means: Vec<Vec<f64>> = (0..k_count)
        .map(|_| (0..dc).map(|_| rng.normal()).collect())
        .collect();
    // base[k][v*dc + j]
    let base: Vec<Vec<f64>> = means
        .iter()
        .map(|mu| {
            (0..n)
                .flat_map(|_| mu.iter().map(|m| m + rng.normal()).collect::<Vec<_>>())
                .collect()
        })
        .collect();

    let mut features = Features::zeros(n, t_count, k_count * dc);
    let mut records = Vec::new();
    for t in 0..t_count {
        let mut noise_rng = Rng::derive(seed, 1 + t as u64);
        let mut per_channel: Vec<BTreeSet<Edge>> = Vec::with_capacity(k_count);
        for (k, b) in base.iter().enumerate() {
            let std = if k < n_inv {
                params.small_noise
            } else {
                params.large_noise
            };
            let x: Vec<f64> = b.iter().map(|v| v + std * noise_rng.normal()).collect();
            for v in 0..n {
                features.row_mut(t, v)[k * dc..(k + 1) * dc]
                    .copy_from_slice(&x[v * dc..(v + 1) * dc]);
            }
            per_channel.push(top_m_cosine(&x, n, dc, params.neighbors));
        }
        let held_out = k_count - 1;
        let mut in_dist: BTreeSet<Edge> = BTreeSet::new();
        for (k, edges) in per_channel.iter().enumerate().take(held_out) {
            for &e in edges {
                if in_dist.insert(e) {
                    records.push((t, e.u, e.v, Some(k as u32)));
                }
            }
        }
        if t >= test_start {
            let candidates: Vec<Edge> = per_channel[held_out]
                .iter()
                .filter(|e| !in_dist.contains(e))
                .copied()
                .collect();
            let take = (params.q_bar * candidates.len() as f64).round() as usize;
            let mut sel_rng = Rng::derive(seed, 1_000 + t as u64);
            let mut picks = sel_rng.sample_indices(candidates.len(), take);
            picks.sort_unstable();
            for i in picks {
                let e = candidates[i];
                records.push((t, e.u, e.v, Some(held_out as u32)));
            }
        }
    }
    let graph = DynamicGraph::from_records(n, t_count, records)?.with_features(features)?;
    Ok(SyntheticDataset {
        graph,
        invariant_channels: (0..n_inv).collect(),
        shifted_attribute: (k_count - 1) as u32,
    })
}

/// Undirected edges linking every node to its `m` most cosine-similar
/// nodes; ties resolve to the lower index.
fn top_m_cosine(x: &[f64], n: usize, d: usize, m: usize) -> BTreeSet<Edge> {
    let unit: Vec<f64> = (0..n)
        .flat_map(|v| {
            let row = &x[v * d..(v + 1) * d];
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            row.iter().map(move |a| a / norm).collect::<Vec<_>>()
        })
        .collect();
    let mut edges = BTreeSet::new();
    let mut sims: Vec<(f64, usize)> = Vec::with_capacity(n);
    for v in 0..n {
        sims.clear();
        let rv = &unit[v * d..(v + 1) * d];
        for u in 0..n {
            if u != v {
                let ru = &unit[u * d..(u + 1) * d];
                sims.push((rv.iter().zip(ru).map(|(a, b)| a * b).sum(), u));
            }
        }
        let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if m < sims.len() {
            sims.select_nth_unstable_by(m, order);
        }
        for &(_, u) in sims.iter().take(m) {
            edges.insert(Edge {
                u: u.min(v),
                v: u.max(v),
            });
        }
    }
    edges
}
