//! Environment-aware multi-channel encoder.
//!
//! Each layer projects node inputs into `K` channel subspaces with separate
//! weights, `z_{v,k} = σ(W_kᵀ x_v + b_k)`, then aggregates neighbours per
//! channel with residual weighting
//!
//! ```text
//! ẑ_{v,k} = z_{v,k} + Σ_{u ∈ N(v)} A_{(u,v),k} · z_{u,k}
//! A_{(u,v),k} = exp(z_{u,k}·z_{v,k}) / Σ_{k'} exp(z_{u,k'}·z_{v,k'})
//! ```
//!
//! so the edge weights of one edge sum to one across channels. The first
//! layer sees `x_v^t + RTE(t)` shared by all channels; later layers map each
//! channel separately. After the last layer, representations are averaged
//! over the time prefix (`z^t = mean(ẑ^0..=ẑ^t)`), which keeps the encoder
//! causal.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DynamicGraph;
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Tape, Tensor, Var};

/// Normalization axis of the edge weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionAxis {
    /// Softmax over the `K` channels of each edge.
    #[default]
    Channels,
    /// Softmax over the incoming edges of each node, per channel.
    Neighbors,
}

/// Sinusoidal time encoding: entry `2i` is `sin(t / 10000^{2i/d})`, entry
/// `2i + 1` is `cos` of the same angle.
pub fn rte_encode(t: usize, d: usize) -> Result<Vec<f64>> {
    if !d.is_multiple_of(2) {
        return Err(Error::invalid(format!("time encoding needs an even dimension, got {d}")));
    }
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(out)
}

/// One layer: `K` independent projections `d_in → d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct EAConvLayer {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl EAConvLayer {
    /// Uniform `[−1/√d_in, 1/√d_in]` initialization with a separate stream
    /// per channel.
    pub fn new(d_in: usize, d_out: usize, channels: usize, seed: u64) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let mut weights = Vec::with_capacity(channels);
        let mut biases = Vec::with_capacity(channels);
        for k in 0..channels {
            let mut rng = Rng::derive(seed, k as u64);
            weights.push(Tensor::uniform(&[d_in, d_out], -bound, bound, &mut rng).with_grad());
            biases.push(Tensor::uniform(&[d_out], -bound, bound, &mut rng).with_grad());
        }
        Self { weights, biases }
    }

    pub fn channels(&self) -> usize {
        self.weights.len()
    }

    pub fn in_dim(&self) -> usize {
        self.weights[0].shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weights[0].shape()[1]
    }

    pub fn register(&self, tape: &mut Tape) -> LayerVars {
        LayerVars {
            weights: self.weights.iter().map(|w| tape.param(w)).collect(),
            biases: self.biases.iter().map(|b| tape.param(b)).collect(),
        }
    }
}

/// Tape handles of one layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

/// Layer input: one matrix shared by all channels, or one per channel.
#[derive(Debug, Clone, Copy)]
pub enum LayerInput {
    /// `[N, d_in]`
    Shared(Var),
    /// `[N, K, d_in]`
    PerChannel(Var),
}

#[derive(Debug, Clone, Copy)]
pub struct ConvOutput {
    /// `[N, K, d_out]`
    pub z_hat: Var,
    /// `[E, K]` weights of the directed message list (`None` without edges).
    pub attention: Option<Var>,
}

/// Runs one layer for one snapshot. `src`/`dst` are the directed message
/// lists (both orientations of each undirected edge).
pub fn eaconv_forward(
    tape: &mut Tape,
    layer: &LayerVars,
    input: LayerInput,
    src: &[usize],
    dst: &[usize],
    axis: AttentionAxis,
) -> Result<ConvOutput> {
    let k_count = layer.weights.len();
    let (n, d_in) = match input {
        LayerInput::Shared(x) => {
            let s = tape.shape(x);
            if s.len() != 2 {
                return Err(Error::shape("eaconv input", s, &[0, 0]));
            }
            (s[0], s[1])
        }
        LayerInput::PerChannel(x) => {
            let s = tape.shape(x);
            if s.len() != 3 || s[1] != k_count {
                return Err(Error::shape("eaconv input", s, &[0, k_count, 0]));
            }
            (s[0], s[2])
        }
    };
    let w_shape = tape.shape(layer.weights[0]).to_vec();
    if w_shape[0] != d_in {
        return Err(Error::shape("eaconv weights", &w_shape, &[n, d_in]));
    }
    let d_out = w_shape[1];

    let mut channels = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let xk = match input {
            LayerInput::Shared(x) => x,
            LayerInput::PerChannel(x) => {
                let s = tape.slice(x, 1, k, 1)?;
                tape.reshape(s, &[n, d_in])?
            }
        };
        let lin = tape.matmul(xk, layer.weights[k])?;
        let lin = tape.add(lin, layer.biases[k])?;
        let act = tape.sigmoid(lin);
        channels.push(tape.reshape(act, &[n, 1, d_out])?);
    }
    let z = tape.concat(&channels, 1)?;

    if src.is_empty() {
        return Ok(ConvOutput {
            z_hat: z,
            attention: None,
        });
    }
    let e = src.len();
    let zs = tape.gather_rows(z, src)?;
    let zd = tape.gather_rows(z, dst)?;
    let prod = tape.mul(zs, zd)?;
    let scores = tape.reduce(crate::tensor::ReduceOp::Sum, prod, Some(2))?; // [E, K]
    let att = match axis {
        AttentionAxis::Channels => tape.softmax(scores, 1)?,
        AttentionAxis::Neighbors => {
            // Scores are bounded by d_out (sigmoid outputs), so exp is safe.
            let ex = tape.exp(scores);
            let denom = tape.scatter_add_rows(ex, dst, n)?;
            let denom_e = tape.gather_rows(denom, dst)?;
            tape.div(ex, denom_e)?
        }
    };
    let att3 = tape.reshape(att, &[e, k_count, 1])?;
    let msgs = tape.mul(zs, att3)?;
    let agg = tape.scatter_add_rows(msgs, dst, n)?;
    let z_hat = tape.add(z, agg)?;
    Ok(ConvOutput {
        z_hat,
        attention: Some(att),
    })
}

/// Running mean along the time axis (axis 1) of `[N, T, K, d]`.
pub fn temporal_mean(tape: &mut Tape, pre_pool: Var) -> Result<Var> {
    tape.prefix_mean(pre_pool, 1)
}

/// Same as [`temporal_mean`] on a plain tensor.
pub fn temporal_mean_tensor(pre_pool: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(pre_pool.clone());
    let z = temporal_mean(&mut tape, x)?;
    Ok(tape.value(z).clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub channels: usize,
    pub attention: AttentionAxis,
}

/// `L` stacked layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub layers: Vec<EAConvLayer>,
    pub attention: AttentionAxis,
}

/// Per-node, per-time, per-channel representations, `[N, T, K, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvRepresentation {
    /// After temporal pooling.
    pub z: Tensor,
    /// Spatial outputs before pooling.
    pub pre_pool: Tensor,
}

impl EnvRepresentation {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.z.shape();
        (s[0], s[1], s[2], s[3])
    }

    /// `z[v][t][k][..]`.
    pub fn slice(&self, v: usize, t: usize, k: usize) -> &[f64] {
        let (_, tt, kk, d) = self.dims();
        let off = ((v * tt + t) * kk + k) * d;
        &self.z.data()[off..off + d]
    }
}

/// Tape handles of a full encoder.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub layers: Vec<LayerVars>,
}

/// Tape outputs of [`Encoder::forward`], both `[N, T, K, d]`.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    pub pre_pool: Var,
    pub z: Var,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        if cfg.layers == 0 || cfg.channels == 0 || cfg.hidden_dim == 0 {
            return Err(Error::Config("encoder needs ≥1 layer, channel and hidden unit".into()));
        }
        if !cfg.input_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "input feature dimension {} must be even for the time encoding",
                cfg.input_dim
            )));
        }
        let layers = (0..cfg.layers)
            .map(|l| {
                let d_in = if l == 0 { cfg.input_dim } else { cfg.hidden_dim };
                EAConvLayer::new(d_in, cfg.hidden_dim, cfg.channels, derive_seed(seed, l as u64))
            })
            .collect();
        Ok(Self {
            layers,
            attention: cfg.attention,
        })
    }

    pub fn channels(&self) -> usize {
        self.layers[0].channels()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers.last().map_or(0, EAConvLayer::out_dim)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().zip(&l.biases).flat_map(|(w, b)| [w, b]))
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                l.weights
                    .iter_mut()
                    .zip(l.biases.iter_mut())
                    .flat_map(|(w, b)| [w, b])
            })
            .collect()
    }

    pub fn register(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            layers: self.layers.iter().map(|l| l.register(tape)).collect(),
        }
    }

    /// Parameter handles in the order of [`Encoder::parameters`].
    pub fn param_vars(vars: &EncoderVars) -> Vec<Var> {
        vars.layers
            .iter()
            .flat_map(|l| l.weights.iter().zip(&l.biases).flat_map(|(w, b)| [*w, *b]))
            .collect()
    }

    /// Encodes snapshots `window` (which must start at 0) on `tape`.
    /// `attention_log`, when given, receives `(layer, t, A)` per layer and
    /// snapshot.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &EncoderVars,
        g: &DynamicGraph,
        window: Range<usize>,
        mut attention_log: Option<&mut Vec<(usize, usize, Tensor)>>,
    ) -> Result<EncodedVars> {
        if window.start != 0 || window.end > g.num_snapshots() || window.is_empty() {
            return Err(Error::invalid(format!(
                "encoding window {window:?} invalid for {} snapshots",
                g.num_snapshots()
            )));
        }
        let feats = g
            .features()
            .ok_or_else(|| Error::Data("graph has no node features".into()))?;
        let (n, d_in) = (g.num_nodes(), feats.dim());
        if d_in != self.input_dim() {
            return Err(Error::shape("encoder input", &[n, d_in], &[n, self.input_dim()]));
        }
        let k_count = self.channels();
        let d = self.hidden_dim();
        let mut per_t = Vec::with_capacity(window.len());
        for t in window.clone() {
            let zt = self.spatial(tape, vars, g, t, attention_log.as_deref_mut())?;
            per_t.push(tape.reshape(zt, &[n, 1, k_count, d])?);
        }
        let pre_pool = tape.concat(&per_t, 1)?;
        let z = temporal_mean(tape, pre_pool)?;
        Ok(EncodedVars { pre_pool, z })
    }

    /// Spatial layers for snapshot `t`: `[N, K, d]` before temporal pooling.
    pub fn spatial(
        &self,
        tape: &mut Tape,
        vars: &EncoderVars,
        g: &DynamicGraph,
        t: usize,
        mut attention_log: Option<&mut Vec<(usize, usize, Tensor)>>,
    ) -> Result<Var> {
        let feats = g
            .features()
            .ok_or_else(|| Error::Data("graph has no node features".into()))?;
        let (n, d_in) = (g.num_nodes(), feats.dim());
        let x = tape.constant(Tensor::new(vec![n, d_in], feats.snapshot(t).to_vec())?);
        let rte = tape.constant(Tensor::from_vec(rte_encode(t, d_in)?));
        let x = tape.add(x, rte)?;
        let (src, dst) = g.message_lists(t);
        let mut input = LayerInput::Shared(x);
        let mut out = None;
        for (l, lv) in vars.layers.iter().enumerate() {
            let o = eaconv_forward(tape, lv, input, &src, &dst, self.attention)?;
            if let (Some(log), Some(a)) = (attention_log.as_deref_mut(), o.attention) {
                log.push((l, t, tape.value(a).clone()));
            }
            input = LayerInput::PerChannel(o.z_hat);
            out = Some(o.z_hat);
        }
        Ok(out.expect("at least one layer"))
    }

    /// Extends `rep` (covering snapshots `0..T0`) to `0..end` by running the
    /// spatial layers on the new snapshots and continuing the prefix means.
    pub fn extend(&self, g: &DynamicGraph, rep: &EnvRepresentation, end: usize) -> Result<EnvRepresentation> {
        let (n, t0, k_count, d) = rep.dims();
        if end < t0 || end > g.num_snapshots() {
            return Err(Error::invalid(format!("cannot extend {t0} snapshots to {end}")));
        }
        let slab = k_count * d;
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let mut pre = vec![0.0; n * end * slab];
        let mut z = vec![0.0; n * end * slab];
        for v in 0..n {
            let src = v * t0 * slab;
            let dst = v * end * slab;
            pre[dst..dst + t0 * slab].copy_from_slice(&rep.pre_pool.data()[src..src + t0 * slab]);
            z[dst..dst + t0 * slab].copy_from_slice(&rep.z.data()[src..src + t0 * slab]);
        }
        for t in t0..end {
            let s = self.spatial(&mut tape, &vars, g, t, None)?;
            let sv = tape.value(s).data();
            for v in 0..n {
                let cur = (v * end + t) * slab;
                pre[cur..cur + slab].copy_from_slice(&sv[v * slab..(v + 1) * slab]);
                for j in 0..slab {
                    // z_t = (t·z_{t−1} + ẑ_t) / (t + 1)
                    let prev = if t == 0 { 0.0 } else { z[cur - slab + j] };
                    z[cur + j] = (t as f64 * prev + pre[cur + j]) / (t + 1) as f64;
                }
            }
        }
        Ok(EnvRepresentation {
            z: Tensor::new(vec![n, end, k_count, d], z)?,
            pre_pool: Tensor::new(vec![n, end, k_count, d], pre)?,
        })
    }

    /// Encodes every snapshot of `g` without recording gradients.
    pub fn encode_graph(&self, g: &DynamicGraph) -> Result<EnvRepresentation> {
        self.encode_window(g, 0..g.num_snapshots())
    }

    pub fn encode_window(&self, g: &DynamicGraph, window: Range<usize>) -> Result<EnvRepresentation> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let out = self.forward(&mut tape, &vars, g, window, None)?;
        Ok(EnvRepresentation {
            z: tape.value(out.z).clone(),
            pre_pool: tape.value(out.pre_pool).clone(),
        })
    }

    /// Edge weights of every layer and snapshot, `(layer, t, [E, K])`.
    pub fn attention_trace(&self, g: &DynamicGraph) -> Result<Vec<(usize, usize, Tensor)>> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let mut log = Vec::new();
        self.forward(&mut tape, &vars, g, 0..g.num_snapshots(), Some(&mut log))?;
        Ok(log)
    }

    fn register_frozen(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    weights: l.weights.iter().map(|w| tape.constant(w.clone())).collect(),
                    biases: l.biases.iter().map(|b| tape.constant(b.clone())).collect(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Features;
    use crate::tensor::sigmoid;

    #[test]
    fn rte_at_zero_alternates() {
        let r = rte_encode(0, 6).unwrap();
        assert_eq!(r, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn rte_hand_value_and_range() {
        let r = rte_encode(1, 2).unwrap();
        assert!((r[0] - 0.841_470_984_807_896_5).abs() < 1e-15);
        assert!((r[1] - 0.540_302_305_868_139_8).abs() < 1e-15);
        for t in 0..50 {
            assert!(rte_encode(t, 16).unwrap().iter().all(|x| (-1.0..=1.0).contains(x)));
        }
        assert!(rte_encode(1, 3).is_err());
    }

    fn cfg(input_dim: usize, layers: usize, channels: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden_dim: 3,
            layers,
            channels,
            attention: AttentionAxis::Channels,
        }
    }

    #[test]
    fn isolated_nodes_keep_projection() {
        let enc = Encoder::new(&cfg(4, 1, 2), 7).unwrap();
        let g = DynamicGraph::empty(3, 1)
            .with_features(Features::random(3, 1, 4, 1))
            .unwrap();
        let rep = enc.encode_graph(&g).unwrap();
        assert_eq!(rep.z.shape(), &[3, 1, 2, 3]);
        let rte = rte_encode(0, 4).unwrap();
        let layer = &enc.layers[0];
        for v in 0..3 {
            let x: Vec<f64> = g.features().unwrap().row(0, v).iter().zip(&rte).map(|(a, b)| a + b).collect();
            for k in 0..2 {
                for j in 0..3 {
                    let w = layer.weights[k].data();
                    let lin: f64 = (0..4).map(|i| x[i] * w[i * 3 + j]).sum::<f64>() + layer.biases[k].data()[j];
                    assert!((rep.slice(v, 0, k)[j] - sigmoid(lin)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn single_channel_weight_is_one() {
        let enc = Encoder::new(&cfg(2, 1, 1), 3).unwrap();
        let g = DynamicGraph::from_records(3, 1, [(0, 0, 1, None), (0, 1, 2, None)])
            .unwrap()
            .with_features(Features::random(3, 1, 2, 2))
            .unwrap();
        for (_, _, a) in enc.attention_trace(&g).unwrap() {
            assert!(a.data().iter().all(|&w| w == 1.0));
        }
        // ẑ_1 = z_1 + z_0 + z_2 for the middle node.
        let mut tape = Tape::new();
        let vars = enc.register(&mut tape);
        let x = tape.constant(Tensor::new(vec![3, 2], g.features().unwrap().snapshot(0).to_vec()).unwrap());
        let rte = tape.constant(Tensor::from_vec(rte_encode(0, 2).unwrap()));
        let x = tape.add(x, rte).unwrap();
        let plain = eaconv_forward(&mut tape, &vars.layers[0], LayerInput::Shared(x), &[], &[], AttentionAxis::Channels).unwrap();
        let rep = enc.encode_graph(&g).unwrap();
        let z = tape.value(plain.z_hat).data().to_vec();
        for j in 0..3 {
            let expect = z[3 + j] + z[j] + z[6 + j];
            assert!((rep.slice(1, 0, 0)[j] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn temporal_mean_cases() {
        let x = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 3.0]).unwrap();
        assert_eq!(temporal_mean_tensor(&x).unwrap().data(), &[1.0, 2.0]);
        let c = Tensor::full(&[2, 4, 1, 2], 0.3);
        let m = temporal_mean_tensor(&c).unwrap();
        assert!(m.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn encoder_is_deterministic() {
        let g = DynamicGraph::from_records(4, 2, [(0, 0, 1, None), (1, 2, 3, None)])
            .unwrap()
            .with_features(Features::random(4, 2, 4, 5))
            .unwrap();
        let a = Encoder::new(&cfg(4, 2, 2), 11).unwrap().encode_graph(&g).unwrap();
        let b = Encoder::new(&cfg(4, 2, 2), 11).unwrap().encode_graph(&g).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_input_dimension_mismatch() {
        let enc = Encoder::new(&cfg(4, 1, 2), 0).unwrap();
        let g = DynamicGraph::empty(3, 1)
            .with_features(Features::random(3, 1, 6, 1))
            .unwrap();
        assert!(enc.encode_graph(&g).is_err());
        assert!(Encoder::new(&cfg(3, 1, 2), 0).is_err());
    }
}
