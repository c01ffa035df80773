//! Environment-aware conditional VAE.
//!
//! Observed samples are the channel slices `z[v][t][k]` labelled with the
//! one-hot multi-label of `(k, t)`. Three fully connected networks are
//! trained on them: a recognition network `q(e | z, y)`, a conditional prior
//! `p(e | y)` and a decoder `p(z | y, e)`. The loss is the analytic KL
//! between the two diagonal Gaussians plus the reconstruction MSE (a
//! unit-variance Gaussian decoder). New environment samples are drawn from
//! the prior for a chosen label and decoded.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EnvRepresentation;
use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpVars};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Tape, Tensor, Var};

/// One-hot `(k, t)` label of length `K·T`, hot at `k·T + t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultiLabel {
    pub k: usize,
    pub t: usize,
    pub channels: usize,
    pub times: usize,
}

pub fn build_multilabel(k: usize, t: usize, channels: usize, times: usize) -> Result<MultiLabel> {
    if k >= channels || t >= times {
        return Err(Error::invalid(format!(
            "label (k={k}, t={t}) outside K={channels}, T={times}"
        )));
    }
    Ok(MultiLabel { k, t, channels, times })
}

impl MultiLabel {
    pub fn index(&self) -> usize {
        self.k * self.times + self.t
    }

    pub fn from_index(index: usize, channels: usize, times: usize) -> Result<Self> {
        build_multilabel(index / times.max(1), index % times.max(1), channels, times)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.channels * self.times];
        y[self.index()] = 1.0;
        y
    }
}

/// Flat collection of `d`-dimensional samples with label indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnvSamples {
    pub dim: usize,
    pub values: Vec<f64>,
    pub labels: Vec<usize>,
}

impl EnvSamples {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            values: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, z: &[f64], label: usize) {
        debug_assert_eq!(z.len(), self.dim);
        self.values.extend_from_slice(z);
        self.labels.push(label);
    }

    /// Observed samples of a representation, ordered by node, time, channel.
    pub fn observed(rep: &EnvRepresentation) -> Self {
        let (n, t_count, k_count, d) = rep.dims();
        let mut s = Self::new(d);
        s.values = rep.z.data().to_vec();
        s.labels.reserve(n * t_count * k_count);
        for _ in 0..n {
            for t in 0..t_count {
                for k in 0..k_count {
                    s.labels.push(k * t_count + t);
                }
            }
        }
        s
    }

    /// Writes `k,t,f0..` rows.
    pub fn write_csv(&self, path: &Path, times: usize) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        let cols: Vec<String> = (0..self.dim).map(|j| format!("f{j}")).collect();
        writeln!(w, "k,t,{}", cols.join(","))?;
        for i in 0..self.len() {
            let l = self.labels[i];
            write!(w, "{},{}", l / times, l % times)?;
            for x in self.get(i) {
                write!(w, ",{x}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Observed (`S_ob`) and generated (`S_ge`) samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnvSampleLibrary {
    pub observed: EnvSamples,
    pub generated: EnvSamples,
}

impl EnvSampleLibrary {
    pub fn is_empty(&self) -> bool {
        self.observed.is_empty() && self.generated.is_empty()
    }

    /// One sample: from `observed` with probability `mixing_ratio`, else from
    /// `generated`. Falls back to whichever side is nonempty.
    pub fn draw(&self, mixing_ratio: f64, rng: &mut Rng) -> Result<&[f64]> {
        let from_observed = if self.generated.is_empty() {
            true
        } else if self.observed.is_empty() {
            false
        } else {
            rng.bernoulli(mixing_ratio)
        };
        let side = if from_observed { &self.observed } else { &self.generated };
        if side.is_empty() {
            return Err(Error::invalid("empty environment sample library"));
        }
        Ok(side.get(rng.below(side.len())))
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        let hit = |s: &EnvSamples| (0..s.len()).any(|i| s.get(i) == z);
        hit(&self.observed) || hit(&self.generated)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcvaeConfig {
    pub sample_dim: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub channels: usize,
    pub times: usize,
}

impl EcvaeConfig {
    pub fn label_dim(&self) -> usize {
        self.channels * self.times
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcvaeModel {
    pub cfg: EcvaeConfig,
    /// `[z‖y] → (μ, logvar)`, output width `2·d_e`.
    pub recognition: Mlp,
    /// `y → (μ_p, logvar_p)`.
    pub prior: Mlp,
    /// `[e‖y] → z`.
    pub decoder: Mlp,
}

#[derive(Debug, Clone)]
pub struct EcvaeVars {
    pub recognition: MlpVars,
    pub prior: MlpVars,
    pub decoder: MlpVars,
}

impl EcvaeVars {
    pub fn vars(&self) -> Vec<Var> {
        [&self.recognition, &self.prior, &self.decoder]
            .into_iter()
            .flat_map(MlpVars::vars)
            .collect()
    }
}

/// Loss pieces on the tape.
#[derive(Debug, Clone, Copy)]
pub struct EcvaeTerms {
    pub kl: Var,
    pub mse: Var,
    pub total: Var,
}

impl EcvaeModel {
    pub fn new(cfg: EcvaeConfig, seed: u64) -> Result<Self> {
        let (d, de, h, y) = (cfg.sample_dim, cfg.latent_dim, cfg.hidden_dim, cfg.label_dim());
        if d == 0 || de == 0 || h == 0 || y == 0 {
            return Err(Error::Config("ECVAE dimensions must be positive".into()));
        }
        Ok(Self {
            recognition: Mlp::new(&[d + y, h, h, 2 * de], derive_seed(seed, 0))?,
            prior: Mlp::new(&[y, h, h, 2 * de], derive_seed(seed, 1))?,
            decoder: Mlp::new(&[de + y, h, h, d], derive_seed(seed, 2))?,
            cfg,
        })
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut p = self.recognition.parameters();
        p.extend(self.prior.parameters());
        p.extend(self.decoder.parameters());
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.recognition.parameters_mut();
        p.extend(self.prior.parameters_mut());
        p.extend(self.decoder.parameters_mut());
        p
    }

    pub fn register(&self, tape: &mut Tape) -> EcvaeVars {
        EcvaeVars {
            recognition: self.recognition.register(tape),
            prior: self.prior.register(tape),
            decoder: self.decoder.register(tape),
        }
    }

    pub fn register_frozen(&self, tape: &mut Tape) -> EcvaeVars {
        EcvaeVars {
            recognition: self.recognition.register_frozen(tape),
            prior: self.prior.register_frozen(tape),
            decoder: self.decoder.register_frozen(tape),
        }
    }

    /// One-hot label matrix `[B, K·T]`.
    pub fn label_matrix(&self, labels: &[usize]) -> Result<Tensor> {
        let width = self.cfg.label_dim();
        let mut y = Tensor::zeros(&[labels.len(), width]);
        for (i, &l) in labels.iter().enumerate() {
            if l >= width {
                return Err(Error::invalid(format!("label index {l} ≥ {width}")));
            }
            y.data_mut()[i * width + l] = 1.0;
        }
        Ok(y)
    }

    fn split_heads(&self, tape: &mut Tape, out: Var) -> Result<(Var, Var)> {
        let de = self.cfg.latent_dim;
        Ok((tape.slice(out, 1, 0, de)?, tape.slice(out, 1, de, de)?))
    }

    /// `q(e | z, y)` parameters, each `[B, d_e]`.
    pub fn encode(&self, tape: &mut Tape, vars: &EcvaeVars, z: Var, y: Var) -> Result<(Var, Var)> {
        let zs = tape.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != self.cfg.sample_dim {
            return Err(Error::shape("ecvae encode", &zs, &[zs.first().copied().unwrap_or(0), self.cfg.sample_dim]));
        }
        let zy = tape.concat(&[z, y], 1)?;
        let out = vars.recognition.forward(tape, zy)?;
        self.split_heads(tape, out)
    }

    /// `p(e | y)` parameters.
    pub fn prior_params(&self, tape: &mut Tape, vars: &EcvaeVars, y: Var) -> Result<(Var, Var)> {
        let out = vars.prior.forward(tape, y)?;
        self.split_heads(tape, out)
    }

    pub fn decode(&self, tape: &mut Tape, vars: &EcvaeVars, e: Var, y: Var) -> Result<Var> {
        let ey = tape.concat(&[e, y], 1)?;
        vars.decoder.forward(tape, ey)
    }

    /// KL + MSE for a batch `z: [B, d]` with labels and noise `eps: [B, d_e]`.
    pub fn loss_terms(
        &self,
        tape: &mut Tape,
        vars: &EcvaeVars,
        z: &Tensor,
        labels: &[usize],
        eps: &Tensor,
    ) -> Result<EcvaeTerms> {
        if labels.is_empty() {
            return Err(Error::invalid("ECVAE loss on an empty batch"));
        }
        let y = tape.constant(self.label_matrix(labels)?);
        let zc = tape.constant(z.clone());
        let (mu_q, lv_q) = self.encode(tape, vars, zc, y)?;
        let (mu_p, lv_p) = self.prior_params(tape, vars, y)?;
        let eps = tape.constant(eps.clone());
        let e = reparameterize(tape, mu_q, lv_q, eps)?;
        let recon = self.decode(tape, vars, e, y)?;
        let kl = gaussian_kl_tape(tape, mu_q, lv_q, mu_p, lv_p, labels.len())?;
        let err = tape.sub(recon, zc)?;
        let sq = tape.square(err);
        let mse = tape.mean_all(sq);
        let total = tape.add(kl, mse)?;
        Ok(EcvaeTerms { kl, mse, total })
    }

    /// Loss value for a batch without recording gradients for later use.
    pub fn loss_value(&self, z: &Tensor, labels: &[usize], eps: &Tensor) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let t = self.loss_terms(&mut tape, &vars, z, labels, eps)?;
        Ok((tape.item(t.kl), tape.item(t.mse)))
    }

    /// Draws `count` labels uniformly, samples `e` from the conditional prior
    /// and decodes. The result is plain data with no link to the parameters.
    pub fn generate_library(&self, count: usize, seed: u64) -> Result<EnvSamples> {
        if count == 0 {
            return Err(Error::invalid("generate_library needs count ≥ 1"));
        }
        let mut rng = Rng::new(seed);
        let labels: Vec<usize> = (0..count).map(|_| rng.below(self.cfg.label_dim())).collect();
        let eps = Tensor::randn(&[count, self.cfg.latent_dim], &mut rng);
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let y = tape.constant(self.label_matrix(&labels)?);
        let (mu, lv) = self.prior_params(&mut tape, &vars, y)?;
        let eps = tape.constant(eps);
        let e = reparameterize(&mut tape, mu, lv, eps)?;
        let z = self.decode(&mut tape, &vars, e, y)?;
        Ok(EnvSamples {
            dim: self.cfg.sample_dim,
            values: tape.value(z).data().to_vec(),
            labels,
        })
    }
}

/// `e = μ + exp(logvar / 2) · ε`.
pub fn reparameterize(tape: &mut Tape, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = tape.mul_scalar(logvar, 0.5);
    let std = tape.exp(half);
    let noise = tape.mul(std, eps)?;
    tape.add(mu, noise)
}

/// Same as [`reparameterize`] on plain numbers.
pub fn reparameterize_value(mu: f64, logvar: f64, eps: f64) -> f64 {
    mu + (0.5 * logvar).exp() * eps
}

/// `KL(N(μ_q, e^{lv_q}) ‖ N(μ_p, e^{lv_p}))` summed over dimensions.
pub fn gaussian_kl(mu_q: &[f64], lv_q: &[f64], mu_p: &[f64], lv_p: &[f64]) -> f64 {
    let mut kl = 0.0;
    for i in 0..mu_q.len() {
        let d = mu_q[i] - mu_p[i];
        kl += 0.5 * (lv_p[i] - lv_q[i] + (lv_q[i].exp() + d * d) / lv_p[i].exp() - 1.0);
    }
    kl
}

/// Batch mean of the per-row KL.
fn gaussian_kl_tape(
    tape: &mut Tape,
    mu_q: Var,
    lv_q: Var,
    mu_p: Var,
    lv_p: Var,
    batch: usize,
) -> Result<Var> {
    let diff = tape.sub(mu_q, mu_p)?;
    let diff2 = tape.square(diff);
    let var_q = tape.exp(lv_q);
    let num = tape.add(var_q, diff2)?;
    let neg_lv_p = tape.mul_scalar(lv_p, -1.0);
    let inv_var_p = tape.exp(neg_lv_p);
    let ratio = tape.mul(num, inv_var_p)?;
    let log_ratio = tape.sub(lv_p, lv_q)?;
    let term = tape.add(log_ratio, ratio)?;
    let term = tape.add_scalar(term, -1.0);
    let s = tape.sum_all(term);
    Ok(tape.mul_scalar(s, 0.5 / batch as f64))
}
