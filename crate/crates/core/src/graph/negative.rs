use std::collections::HashSet;

use super::{DynamicGraph, Edge};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// `count` distinct node pairs drawn uniformly from the pairs not in
/// `exclude`, in draw order.
pub fn sample_non_edges(
    num_nodes: usize,
    exclude: &HashSet<Edge>,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<Edge>> {
    let total = num_nodes * num_nodes.saturating_sub(1) / 2;
    let available = total.saturating_sub(exclude.len());
    if count > available {
        return Err(Error::Data(format!(
            "requested {count} negative pairs but only {available} non-edges exist"
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    if count.saturating_mul(3) > available {
        // Dense regime: enumerate and partially shuffle.
        let mut pool = Vec::with_capacity(available);
        for u in 0..num_nodes {
            for v in u + 1..num_nodes {
                let e = Edge { u, v };
                if !exclude.contains(&e) {
                    pool.push(e);
                }
            }
        }
        let picks = rng.sample_indices(pool.len(), count);
        return Ok(picks.into_iter().map(|i| pool[i]).collect());
    }
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = rng.below(num_nodes);
        let b = rng.below(num_nodes);
        if a == b {
            continue;
        }
        let e = Edge {
            u: a.min(b),
            v: a.max(b),
        };
        if !exclude.contains(&e) && seen.insert(e) {
            out.push(e);
        }
    }
    Ok(out)
}

/// Uniform non-edges of snapshot `t`, deterministic per `seed`.
pub fn sample_negative_edges(g: &DynamicGraph, t: usize, count: usize, seed: u64) -> Result<Vec<Edge>> {
    if t >= g.num_snapshots() {
        return Err(Error::invalid(format!("snapshot {t} out of range")));
    }
    let exclude: HashSet<Edge> = g.edges(t).collect();
    sample_non_edges(g.num_nodes(), &exclude, count, &mut Rng::new(seed))
}
