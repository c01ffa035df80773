//! Fully connected layers on the tape.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform `[−1/√d_in, 1/√d_in]` initialization.
    pub fn new(d_in: usize, d_out: usize, seed: u64) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let mut rng = Rng::new(seed);
        Self {
            weight: Tensor::uniform(&[d_in, d_out], -bound, bound, &mut rng).with_grad(),
            bias: Tensor::uniform(&[d_out], -bound, bound, &mut rng).with_grad(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Stack of linear layers with LeakyReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Tape handles `(weight, bias)` per layer.
#[derive(Debug, Clone)]
pub struct MlpVars(pub Vec<(Var, Var)>);

impl Mlp {
    /// `dims = [d_in, h_1, ..., d_out]`.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("bad layer sizes {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(w[0], w[1], derive_seed(seed, i as u64)))
            .collect();
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::out_dim)
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        MlpVars(
            self.layers
                .iter()
                .map(|l| (tape.param(&l.weight), tape.param(&l.bias)))
                .collect(),
        )
    }

    /// Registers the weights as constants (no gradient).
    pub fn register_frozen(&self, tape: &mut Tape) -> MlpVars {
        MlpVars(
            self.layers
                .iter()
                .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())))
                .collect(),
        )
    }
}

impl MlpVars {
    /// `x: [B, d_in] → [B, d_out]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.0.iter().enumerate() {
            let lin = tape.matmul(h, w)?;
            h = tape.add(lin, b)?;
            if i + 1 < self.0.len() {
                h = tape.leaky_relu(h);
            }
        }
        Ok(h)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.0.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}
