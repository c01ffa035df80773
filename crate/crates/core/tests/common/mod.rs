//! Shared helpers for the integration tests.
#![allow(dead_code)]

use dyngraph_ood::graph::{DynamicGraph, Features};
use dyngraph_ood::rng::Rng;
use dyngraph_ood::tensor::{Tape, Tensor, Var};
use dyngraph_ood::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Relative error with a small floor so that exact zeros compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between reverse-mode gradients of the scalar
/// `f(inputs)` and central finite differences, over every coordinate of
/// every input.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &vars).expect("forward");
    let grads = tape.backward(loss).expect("backward");

    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).expect("forward");
        tape.item(out)
    };
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

pub fn uniform(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, rng)
}

/// Random undirected graph with `edges` draws per snapshot and standard
/// normal features.
pub fn random_graph(n: usize, t: usize, edges: usize, dim: usize, seed: u64) -> DynamicGraph {
    let mut rng = Rng::new(seed);
    let mut recs = Vec::new();
    for s in 0..t {
        for _ in 0..edges {
            let a = rng.below(n);
            let b = rng.below(n);
            if a != b {
                recs.push((s, a, b, None));
            }
        }
    }
    DynamicGraph::from_records(n, t, recs)
        .unwrap()
        .with_features(Features::random(n, t, dim, seed ^ 0xABCD))
        .unwrap()
}
