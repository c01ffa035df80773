use std::collections::BTreeMap;
use std::ops::Range;

use super::{sample_negative_edges, DynamicGraph, Edge};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// Positives of one evaluation snapshot and an equal number of sampled
/// non-edges.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub positives: Vec<Edge>,
    pub negatives: Vec<Edge>,
}

/// Contiguous train/validation/test snapshot ranges plus fixed evaluation
/// negatives for every validation and test snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    pub eval: BTreeMap<usize, EvalSet>,
}

impl SplitSpec {
    pub fn num_snapshots(&self) -> usize {
        self.test.end
    }

    pub fn eval_set(&self, t: usize) -> Option<&EvalSet> {
        self.eval.get(&t)
    }
}

/// Splits `g` into consecutive ranges of `train_n`, `val_n` and `test_n`
/// snapshots. Evaluation negatives depend only on `seed` and the snapshot
/// index, so every method evaluated on the same data sees the same pairs.
pub fn chronological_split(
    g: &DynamicGraph,
    train_n: usize,
    val_n: usize,
    test_n: usize,
    seed: u64,
) -> Result<SplitSpec> {
    let t = g.num_snapshots();
    if train_n + val_n + test_n != t {
        return Err(Error::Config(format!(
            "split {train_n}/{val_n}/{test_n} does not cover {t} snapshots"
        )));
    }
    if train_n == 0 || val_n == 0 || test_n == 0 {
        return Err(Error::Config("every split range needs at least one snapshot".into()));
    }
    let train = 0..train_n;
    let val = train_n..train_n + val_n;
    let test = train_n + val_n..t;
    let mut eval = BTreeMap::new();
    for s in val.clone().chain(test.clone()) {
        let positives = g.edge_vec(s);
        let negatives = sample_negative_edges(g, s, positives.len(), derive_seed(seed, s as u64))?;
        eval.insert(s, EvalSet { positives, negatives });
    }
    Ok(SplitSpec {
        train,
        val,
        test,
        eval,
    })
}
