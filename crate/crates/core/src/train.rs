//! Losses and the training loop.
//!
//! Each epoch encodes the training window, refreshes the observed sample
//! library and the per-node channel partitions, and minimizes
//!
//! ```text
//! L = L_task + α·L_risk + β·L_ECVAE
//! ```
//!
//! `L_task` is the binary cross-entropy of an inner-product predictor that
//! only sees invariant channels. `L_risk` is the variance of the unmasked
//! task loss over `S` interventions, each replacing the variant channel
//! slices of a random node subset with library samples.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::cvae::{EcvaeConfig, EcvaeModel, EnvSampleLibrary, EnvSamples};
use crate::encoder::{AttentionAxis, Encoder, EncoderConfig, EnvRepresentation};
use crate::error::{Error, Result};
use crate::graph::{sample_non_edges, DynamicGraph, Edge, SplitSpec};
use crate::invariance::{partition_all, InvariantPartition, PartitionRule, DEFAULT_QUANTIZATION};
use crate::metrics::auc;
use crate::rng::{derive_seed, Rng};
use crate::tensor::{sigmoid, softplus, AdamState, ReduceOp, Tape, Tensor, Var};

/// Stream tags for [`derive_seed`].
const STREAM_MODEL: u64 = 1;
const STREAM_NEGATIVES: u64 = 2;
const STREAM_ECVAE: u64 = 3;
const STREAM_LIBRARY: u64 = 4;
const STREAM_INTERVENE: u64 = 5;

/// Every hyperparameter of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Intervention repetitions `S`.
    pub interventions: usize,
    pub intervention_ratio: f64,
    /// Probability that an intervention sample comes from the observed set.
    pub mixing_ratio: f64,
    pub channels: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub latent_dim: usize,
    pub ecvae_hidden: usize,
    pub quantization: u64,
    pub partition_rule: PartitionRule,
    pub attention: AttentionAxis,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Observed samples per ECVAE step; all of them when `None`.
    pub ecvae_batch: Option<usize>,
    /// Generated samples per epoch; `|S_ob|` when `None`.
    pub library_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1e-4,
            interventions: 3,
            intervention_ratio: 0.6,
            mixing_ratio: 0.5,
            channels: 5,
            hidden_dim: 16,
            layers: 2,
            latent_dim: 16,
            ecvae_hidden: 64,
            quantization: DEFAULT_QUANTIZATION,
            partition_rule: PartitionRule::Threshold,
            attention: AttentionAxis::Channels,
            lr: 0.01,
            max_epochs: 1000,
            patience: 50,
            seed: 0,
            ecvae_batch: Some(512),
            library_size: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("alpha and beta must be finite and ≥ 0, got {} and {}", self.alpha, self.beta));
        }
        if self.interventions == 0 {
            return bad("interventions must be ≥ 1".into());
        }
        for (name, v) in [
            ("intervention_ratio", self.intervention_ratio),
            ("mixing_ratio", self.mixing_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.channels == 0 || self.hidden_dim == 0 || self.layers == 0 || self.latent_dim == 0 || self.ecvae_hidden == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.quantization == 0 {
            return bad("quantization must be ≥ 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be ≥ 1".into());
        }
        if self.ecvae_batch == Some(0) || self.library_size == Some(0) {
            return bad("ecvae_batch and library_size must be ≥ 1 when set".into());
        }
        Ok(())
    }
}

/// Encoder plus ECVAE.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub ecvae: EcvaeModel,
}

impl Model {
    /// `times` is the number of snapshots the multi-labels cover (the
    /// training window).
    pub fn new(cfg: &TrainConfig, input_dim: usize, times: usize) -> Result<Self> {
        let seed = derive_seed(cfg.seed, STREAM_MODEL);
        let encoder = Encoder::new(
            &EncoderConfig {
                input_dim,
                hidden_dim: cfg.hidden_dim,
                layers: cfg.layers,
                channels: cfg.channels,
                attention: cfg.attention,
            },
            derive_seed(seed, 0),
        )?;
        let ecvae = EcvaeModel::new(
            EcvaeConfig {
                sample_dim: cfg.hidden_dim,
                latent_dim: cfg.latent_dim,
                hidden_dim: cfg.ecvae_hidden,
                channels: cfg.channels,
                times,
            },
            derive_seed(seed, 1),
        )?;
        Ok(Self { encoder, ecvae })
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.parameters();
        p.extend(self.ecvae.parameters());
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.parameters_mut();
        p.extend(self.ecvae.parameters_mut());
        p
    }
}

/// Zero/one mask `[N, K·d]` keeping each node's invariant channels.
pub fn channel_mask(partitions: &[InvariantPartition], k: usize, d: usize) -> Tensor {
    let mut m = Tensor::zeros(&[partitions.len(), k * d]);
    for (v, p) in partitions.iter().enumerate() {
        for &c in &p.invariant {
            m.data_mut()[v * k * d + c * d..v * k * d + (c + 1) * d].fill(1.0);
        }
    }
    m
}

/// Inner products of the flattened (optionally masked) representations at
/// time `t`.
pub fn link_logits(
    rep: &EnvRepresentation,
    t: usize,
    pairs: &[Edge],
    partitions: Option<&[InvariantPartition]>,
) -> Vec<f64> {
    let (_, _, k, _) = rep.dims();
    let keep = |v: usize, c: usize| partitions.is_none_or(|p| p[v].is_invariant(c));
    pairs
        .iter()
        .map(|e| {
            (0..k)
                .filter(|&c| keep(e.u, c) && keep(e.v, c))
                .map(|c| {
                    rep.slice(e.u, t, c)
                        .iter()
                        .zip(rep.slice(e.v, t, c))
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                })
                .sum()
        })
        .collect()
}

/// `σ(logit)` link probabilities.
pub fn predict_links(
    rep: &EnvRepresentation,
    t: usize,
    pairs: &[Edge],
    partitions: Option<&[InvariantPartition]>,
) -> Vec<f64> {
    link_logits(rep, t, pairs, partitions).into_iter().map(sigmoid).collect()
}

/// Mean binary cross-entropy of probabilities, clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::invalid("bce needs equal-length nonempty inputs"));
    }
    let s: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(s / scores.len() as f64)
}

/// Mean BCE of logits, `softplus(−s)` for positives and `softplus(s)` for
/// negatives.
pub fn bce_logits(pos: &[f64], neg: &[f64]) -> f64 {
    let s: f64 = pos.iter().map(|&x| softplus(-x)).sum::<f64>() + neg.iter().map(|&x| softplus(x)).sum::<f64>();
    s / (pos.len() + neg.len()) as f64
}

/// Positives of snapshot `t + 1` and sampled non-edges, predicted from the
/// representation at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub t: usize,
    pub positives: Vec<Edge>,
    pub negatives: Vec<Edge>,
}

/// Every consecutive pair of the training range with one negative per
/// positive.
pub fn train_pairs(g: &DynamicGraph, split: &SplitSpec, rng: &mut Rng) -> Result<Vec<TrainPair>> {
    if split.train.len() < 2 {
        return Err(Error::Config(format!(
            "training needs ≥ 2 snapshots, got {}",
            split.train.len()
        )));
    }
    let mut out = Vec::with_capacity(split.train.len() - 1);
    for t in split.train.start..split.train.end - 1 {
        let positives = g.edge_vec(t + 1);
        let exclude: HashSet<Edge> = positives.iter().copied().collect();
        let negatives = sample_non_edges(g.num_nodes(), &exclude, positives.len(), rng)?;
        out.push(TrainPair { t, positives, negatives });
    }
    Ok(out)
}

/// Logits on the tape for `pairs` at time `t` of `z: [N, T, K, d]`.
fn logits_tape(tape: &mut Tape, z: Var, t: usize, pairs: &[Edge], mask: Option<Var>) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    let (n, kd) = (s[0], s[2] * s[3]);
    let zt = tape.slice(z, 1, t, 1)?;
    let mut zt = tape.reshape(zt, &[n, kd])?;
    if let Some(m) = mask {
        zt = tape.mul(zt, m)?;
    }
    let us: Vec<usize> = pairs.iter().map(|e| e.u).collect();
    let vs: Vec<usize> = pairs.iter().map(|e| e.v).collect();
    let zu = tape.gather_rows(zt, &us)?;
    let zv = tape.gather_rows(zt, &vs)?;
    let prod = tape.mul(zu, zv)?;
    tape.reduce(ReduceOp::Sum, prod, Some(1))
}

/// Mean BCE over all training pairs on the tape.
pub fn task_loss_tape(tape: &mut Tape, z: Var, pairs: &[TrainPair], mask: Option<Var>) -> Result<Var> {
    let mut parts = Vec::new();
    let mut signs = Vec::new();
    for p in pairs {
        let all: Vec<Edge> = p.positives.iter().chain(&p.negatives).copied().collect();
        if all.is_empty() {
            continue;
        }
        parts.push(logits_tape(tape, z, p.t, &all, mask)?);
        signs.extend(std::iter::repeat_n(-1.0, p.positives.len()));
        signs.extend(std::iter::repeat_n(1.0, p.negatives.len()));
    }
    if parts.is_empty() {
        return Err(Error::Data("no training links in the training range".into()));
    }
    let logits = tape.concat(&parts, 0)?;
    let signs = tape.constant(Tensor::from_vec(signs));
    let signed = tape.mul(logits, signs)?;
    let l = tape.softplus(signed);
    Ok(tape.mean_all(l))
}

/// Slice replacements of one intervention: spans `(offset, d)` into the flat
/// `[N, T, K, d]` array and the concatenated replacement values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InterventionPlan {
    pub spans: Vec<(usize, usize)>,
    pub values: Vec<f64>,
}

impl InterventionPlan {
    /// Picks `⌈ρN⌉` nodes; every variant channel of every picked node at
    /// every time gets its own library draw.
    pub fn sample(
        dims: (usize, usize, usize, usize),
        partitions: &[InvariantPartition],
        library: &EnvSampleLibrary,
        ratio: f64,
        mixing_ratio: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if library.is_empty() {
            return Err(Error::invalid("intervention needs a nonempty sample library"));
        }
        let (n, t_count, k_count, d) = dims;
        let picks = (ratio * n as f64).ceil() as usize;
        let mut nodes = rng.sample_indices(n, picks.min(n));
        nodes.sort_unstable();
        let mut plan = Self::default();
        for v in nodes {
            for &k in &partitions[v].variant {
                for t in 0..t_count {
                    let s = library.draw(mixing_ratio, rng)?;
                    plan.spans.push((((v * t_count + t) * k_count + k) * d, d));
                    plan.values.extend_from_slice(s);
                }
            }
        }
        Ok(plan)
    }

    pub fn apply(&self, z: &Tensor) -> Tensor {
        let mut out = z.clone();
        let mut cursor = 0;
        for &(off, len) in &self.spans {
            out.data_mut()[off..off + len].copy_from_slice(&self.values[cursor..cursor + len]);
            cursor += len;
        }
        out
    }

    pub fn apply_tape(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        if self.spans.is_empty() {
            return Ok(z);
        }
        tape.overwrite(z, &self.spans, &self.values)
    }
}

/// Intervened copy of `z: [N, T, K, d]`.
pub fn intervene(
    z: &Tensor,
    partitions: &[InvariantPartition],
    library: &EnvSampleLibrary,
    ratio: f64,
    mixing_ratio: f64,
    seed: u64,
) -> Result<Tensor> {
    let s = z.shape();
    if s.len() != 4 || s[0] != partitions.len() {
        return Err(Error::shape("intervene", s, &[partitions.len(), 0, 0, 0]));
    }
    let mut rng = Rng::new(seed);
    let plan = InterventionPlan::sample((s[0], s[1], s[2], s[3]), partitions, library, ratio, mixing_ratio, &mut rng)?;
    Ok(plan.apply(z))
}

/// Population variance of the intervened losses (0 for a single draw).
pub fn risk_from_losses(losses: &[f64]) -> f64 {
    if losses.len() < 2 {
        return 0.0;
    }
    crate::metrics::mean_std(losses).1.powi(2)
}

fn risk_tape(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
    if losses.len() < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let cols: Vec<Var> = losses
        .iter()
        .map(|&l| tape.reshape(l, &[1]))
        .collect::<Result<_>>()?;
    let stacked = tape.concat(&cols, 0)?;
    tape.reduce(ReduceOp::Variance, stacked, None)
}

/// Per-epoch losses and the validation AUC of the parameters the epoch
/// started from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub l_task: f64,
    pub l_risk: f64,
    pub l_ecvae: f64,
    pub total: f64,
    pub val_auc: f64,
}

/// Optimizer plus per-epoch state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, g: &DynamicGraph, split: &SplitSpec) -> Result<Self> {
        cfg.validate()?;
        let dim = g
            .features()
            .ok_or_else(|| Error::Data("graph has no node features".into()))?
            .dim();
        let model = Model::new(cfg, dim, split.train.len())?;
        let adam = AdamState::new(cfg.lr, model.parameters());
        Ok(Self { model, adam, epoch: 0 })
    }
}

/// Representation, partitions and library of the training window under the
/// current parameters (no gradients).
pub fn inspect(model: &Model, g: &DynamicGraph, split: &SplitSpec, cfg: &TrainConfig) -> Result<(EnvRepresentation, Vec<InvariantPartition>)> {
    let rep = model.encoder.encode_window(g, split.train.clone())?;
    let parts = partition_all(&rep, cfg.quantization, cfg.partition_rule)?;
    Ok((rep, parts))
}

/// Masked-predictor AUC over the evaluation snapshots in `range`, using the
/// representation one step earlier.
pub fn range_auc(
    rep: &EnvRepresentation,
    split: &SplitSpec,
    range: std::ops::Range<usize>,
    partitions: &[InvariantPartition],
) -> Result<f64> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for t in range {
        let set = split
            .eval_set(t)
            .ok_or_else(|| Error::invalid(format!("no evaluation set for snapshot {t}")))?;
        pos.extend(link_logits(rep, t - 1, &set.positives, Some(partitions)));
        neg.extend(link_logits(rep, t - 1, &set.negatives, Some(partitions)));
    }
    auc(&pos, &neg)
}

/// One epoch: forward, losses, backward and an Adam step.
pub fn total_step(state: &mut TrainState, g: &DynamicGraph, split: &SplitSpec, cfg: &TrainConfig) -> Result<LossReport> {
    state.epoch += 1;
    let epoch = state.epoch as u64;
    let model = &mut state.model;
    let mut tape = Tape::new();
    let enc_vars = model.encoder.register(&mut tape);
    let cvae_vars = model.ecvae.register(&mut tape);
    let encoded = model.encoder.forward(&mut tape, &enc_vars, g, split.train.clone(), None)?;
    let rep = EnvRepresentation {
        z: tape.value(encoded.z).clone(),
        pre_pool: tape.value(encoded.pre_pool).clone(),
    };
    let (n, t_count, k_count, d) = rep.dims();

    // Observed samples and the ECVAE term (inputs detached).
    let observed = EnvSamples::observed(&rep);
    let mut rng = Rng::derive(derive_seed(cfg.seed, STREAM_ECVAE), epoch);
    let batch = cfg.ecvae_batch.unwrap_or(observed.len()).min(observed.len());
    let mut idx = rng.sample_indices(observed.len(), batch);
    idx.sort_unstable();
    let zb: Vec<f64> = idx.iter().flat_map(|&i| observed.get(i).to_vec()).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| observed.labels[i]).collect();
    let eps = Tensor::randn(&[batch, cfg.latent_dim], &mut rng);
    let ecvae = model
        .ecvae
        .loss_terms(&mut tape, &cvae_vars, &Tensor::new(vec![batch, d], zb)?, &labels, &eps)?;

    let generated = model.ecvae.generate_library(
        cfg.library_size.unwrap_or(observed.len()),
        derive_seed(derive_seed(cfg.seed, STREAM_LIBRARY), epoch),
    )?;
    let library = EnvSampleLibrary { observed, generated };

    let partitions = partition_all(&rep, cfg.quantization, cfg.partition_rule)?;
    let mut neg_rng = Rng::derive(derive_seed(cfg.seed, STREAM_NEGATIVES), epoch);
    let pairs = train_pairs(g, split, &mut neg_rng)?;

    let mask = tape.constant(channel_mask(&partitions, k_count, d));
    let task = task_loss_tape(&mut tape, encoded.z, &pairs, Some(mask))?;

    let mut int_rng = Rng::derive(derive_seed(cfg.seed, STREAM_INTERVENE), epoch);
    let mut losses = Vec::with_capacity(cfg.interventions);
    for _ in 0..cfg.interventions {
        let plan = InterventionPlan::sample(
            (n, t_count, k_count, d),
            &partitions,
            &library,
            cfg.intervention_ratio,
            cfg.mixing_ratio,
            &mut int_rng,
        )?;
        let zi = plan.apply_tape(&mut tape, encoded.z)?;
        losses.push(task_loss_tape(&mut tape, zi, &pairs, None)?);
    }
    let risk = risk_tape(&mut tape, &losses)?;

    let a = tape.mul_scalar(risk, cfg.alpha);
    let b = tape.mul_scalar(ecvae.total, cfg.beta);
    let total = tape.add(task, a)?;
    let total = tape.add(total, b)?;
    let (l_task, l_risk, l_ecvae) = (tape.item(task), tape.item(risk), tape.item(ecvae.total));
    let total_v = l_task + cfg.alpha * l_risk + cfg.beta * l_ecvae;
    if !total_v.is_finite() || !tape.item(total).is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at epoch {epoch}: task {l_task}, risk {l_risk}, ecvae {l_ecvae}"
        )));
    }

    // Validation with the parameters this epoch started from.
    let val_rep = model.encoder.extend(g, &rep, split.val.end - 1)?;
    let val_auc = range_auc(&val_rep, split, split.val.clone(), &partitions)?;

    let grads = tape.backward(total)?;
    let vars: Vec<Var> = Encoder::param_vars(&enc_vars).into_iter().chain(cvae_vars.vars()).collect();
    for (v, p) in vars.into_iter().zip(model.parameters_mut()) {
        grads.apply_to(v, p)?;
    }
    state.adam.step(model.parameters_mut())?;
    Ok(LossReport {
        epoch: state.epoch,
        l_task,
        l_risk,
        l_ecvae,
        total: total_v,
        val_auc,
    })
}

/// Patience-based stopping on a metric to maximize. Only strict
/// improvements reset the counter.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            wait: 0,
        }
    }

    /// Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> (bool, bool) {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.wait = 0;
            (true, false)
        } else {
            self.wait += 1;
            (false, self.wait >= self.patience)
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters of the best validation epoch.
    pub model: Model,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub history: Vec<LossReport>,
    /// Optimizer state after the last epoch.
    pub adam: AdamState,
}

/// Runs [`total_step`] until `max_epochs` or early stopping, then restores
/// the best parameters.
pub fn fit(g: &DynamicGraph, split: &SplitSpec, cfg: &TrainConfig) -> Result<FitOutcome> {
    let mut state = TrainState::new(cfg, g, split)?;
    let mut stop = EarlyStopping::new(cfg.patience);
    let mut best = state.model.clone();
    let mut history = Vec::new();
    while state.epoch < cfg.max_epochs {
        let before = state.model.clone();
        let report = total_step(&mut state, g, split, cfg)?;
        log::debug!(
            "epoch {} task {:.5} risk {:.3e} ecvae {:.4} val_auc {:.4}",
            report.epoch,
            report.l_task,
            report.l_risk,
            report.l_ecvae,
            report.val_auc
        );
        history.push(report);
        let (improved, halt) = stop.observe(report.epoch, report.val_auc);
        if improved {
            best = before;
        }
        if halt {
            break;
        }
    }
    Ok(FitOutcome {
        model: best,
        best_epoch: stop.best_epoch,
        best_val_auc: stop.best,
        history,
        adam: state.adam,
    })
}
