//! Configuration files, end-to-end runs, evaluation and sweeps.
//!
//! A run loads or generates a dataset, applies its shift protocol, splits it
//! chronologically, trains once per seed and evaluates on the test range.
//! Reports are JSON with fixed key names; loss curves are CSV, one row per
//! epoch.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::error::{Error, Result};
use crate::graph::{
    apply_attribute_filter, chronological_split, gen_env_synthetic, gen_feature_shift, load_dataset,
    DynamicGraph, Edge, EnvSyntheticParams, FeatureShiftParams, ShiftProtocol, SplitSpec,
};
use crate::invariance::{partition_all, InvariantPartition};
use crate::metrics::{auc, i_acc, Summary};
use crate::rng::derive_seed;
use crate::train::{fit, link_logits, LossReport, Model, TrainConfig};

/// The α grid of the sensitivity study.
pub const ALPHA_GRID: [f64; 5] = [1e-3, 1e-2, 1e-1, 1e0, 1e1];
/// The β grid of the sensitivity study.
pub const BETA_GRID: [f64; 5] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2];

/// Which positives the shifted-test AUC uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodMode {
    /// In-distribution plus held-out positives.
    #[default]
    Mixed,
    /// Held-out positives only.
    OodOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory as written by `generate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Shift applied to the loaded data, or the generator when no path is
    /// given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<ShiftProtocol>,
    /// Train/validation/test snapshot counts.
    pub split: [usize; 3],
    /// Seeds generation and the fixed evaluation negatives.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Ablation without the risk term (forces α = 0).
    #[serde(default)]
    pub no_intervention: bool,
    #[serde(default)]
    pub ood_mode: OodMode,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn names<T: Serialize>(v: &T) -> Vec<String> {
    match toml::Value::try_from(v) {
        Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn unknown_in(table: &toml::Table, known: &[String], prefix: &str, out: &mut Vec<String>) {
    for key in table.keys() {
        if !known.iter().any(|k| k == key) {
            out.push(format!("{prefix}{key}"));
        }
    }
}

/// Dotted paths of every key the configuration schema does not know.
pub fn unknown_keys(table: &toml::Table) -> Vec<String> {
    let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let mut out = Vec::new();
    unknown_in(table, &own(&["seeds", "no_intervention", "ood_mode", "data", "train"]), "", &mut out);
    if let Some(toml::Value::Table(train)) = table.get("train") {
        let mut known = names(&TrainConfig::default());
        known.extend(own(&["ecvae_batch", "library_size"]));
        unknown_in(train, &known, "train.", &mut out);
    }
    if let Some(toml::Value::Table(data)) = table.get("data") {
        unknown_in(data, &own(&["path", "protocol", "split", "seed"]), "data.", &mut out);
        if let Some(toml::Value::Table(p)) = data.get("protocol") {
            let mut known = own(&["kind"]);
            match p.get("kind").and_then(toml::Value::as_str) {
                Some("attribute_filter") => known.push("attribute".into()),
                Some("feature_shift") => {
                    known.extend(names(&FeatureShiftParams::default()));
                    known.push("test_start".into());
                }
                Some("env_synthetic") => known.extend(names(&EnvSyntheticParams::default())),
                _ => return out,
            }
            unknown_in(p, &known, "data.protocol.", &mut out);
        }
    }
    out.sort();
    out.dedup();
    out
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))?;
        let unknown = unknown_keys(&table);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let cfg: Self = toml::from_str(text)
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative data paths are relative to the config file.
        if let (Some(data), Some(dir)) = (cfg.data.path.as_mut(), path.parent()) {
            if data.is_relative() {
                *data = dir.join(&*data);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if let Some(p) = &self.data.protocol {
            p.validate()?;
        }
        if self.data.path.is_none() && !matches!(self.data.protocol, Some(ShiftProtocol::EnvSynthetic(_))) {
            return Err(Error::Config(
                "data.path is required unless data.protocol generates the data (env_synthetic)".into(),
            ));
        }
        self.train.validate()
    }

    /// Training configuration for one seed.
    pub fn train_for(&self, seed: u64) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = seed;
        if self.no_intervention {
            t.alpha = 0.0;
        }
        t
    }
}

/// Train view, split and held-out edges of a configured dataset.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub graph: DynamicGraph,
    pub split: SplitSpec,
    /// Held-out positives per snapshot.
    pub ood_edges: Vec<Vec<Edge>>,
    /// Extra negatives per snapshot, as many as held-out positives.
    pub ood_negatives: Vec<Vec<Edge>>,
    pub invariant_channels: Option<Vec<usize>>,
}

/// Splits `full`, keeps the in-distribution positives of `view` and divides
/// the sampled negatives into the regular set and the extra set for the
/// held-out positives.
pub fn prepare_split(
    full: &DynamicGraph,
    view: DynamicGraph,
    ood_edges: Vec<Vec<Edge>>,
    split: [usize; 3],
    seed: u64,
    invariant_channels: Option<Vec<usize>>,
) -> Result<PreparedData> {
    let mut spec = chronological_split(full, split[0], split[1], split[2], seed)?;
    let mut ood_negatives = vec![Vec::new(); full.num_snapshots()];
    for (&t, set) in spec.eval.iter_mut() {
        let positives = view.edge_vec(t);
        let extra = set.negatives.split_off(positives.len().min(set.negatives.len()));
        ood_negatives[t] = extra;
        set.positives = positives;
    }
    Ok(PreparedData {
        graph: view,
        split: spec,
        ood_edges,
        ood_negatives,
        invariant_channels,
    })
}

/// Loads or generates the configured dataset and applies its protocol.
pub fn prepare_data(cfg: &DataConfig) -> Result<PreparedData> {
    let (graph, shifted, truth) = match (&cfg.path, &cfg.protocol) {
        (None, Some(ShiftProtocol::EnvSynthetic(p))) => {
            let ds = gen_env_synthetic(p, cfg.seed)?;
            (ds.graph, Some(ds.shifted_attribute), Some(ds.invariant_channels))
        }
        (None, _) => return Err(Error::Config("data.path is required".into())),
        (Some(path), protocol) => {
            let (g, meta) = load_dataset(path)?;
            let g = g.ensure_features(derive_seed(cfg.seed, 0xFEA7));
            match protocol {
                None => (g, meta.shifted_attribute, meta.invariant_channels),
                Some(ShiftProtocol::AttributeFilter { attribute }) => (g, Some(*attribute), meta.invariant_channels),
                Some(ShiftProtocol::FeatureShift(p)) => {
                    let mut p = p.clone();
                    if p.test_start.is_none() {
                        p.test_start = Some(cfg.split[0] + cfg.split[1]);
                    }
                    (gen_feature_shift(&g, &p, cfg.seed)?, meta.shifted_attribute, meta.invariant_channels)
                }
                Some(ShiftProtocol::EnvSynthetic(_)) => {
                    return Err(Error::Config(
                        "env_synthetic generates its own data; drop data.path or the protocol".into(),
                    ))
                }
            }
        }
    };
    let graph = graph.ensure_features(derive_seed(cfg.seed, 0xFEA7));
    match shifted {
        Some(a) => {
            let f = apply_attribute_filter(&graph, a);
            prepare_split(&graph, f.train_view, f.ood_edges, cfg.split, cfg.seed, truth)
        }
        None => {
            let view = graph.strip_attributes();
            let empty = vec![Vec::new(); graph.num_snapshots()];
            prepare_split(&graph, view, empty, cfg.split, cfg.seed, truth)
        }
    }
}

/// Test metrics of one trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub auc_no_ood: f64,
    pub auc_ood: f64,
    pub i_acc: Option<f64>,
}

/// Partitions from the training window of the current parameters.
pub fn eval_partitions(model: &Model, data: &PreparedData, cfg: &TrainConfig) -> Result<Vec<InvariantPartition>> {
    let rep = model.encoder.encode_window(&data.graph, data.split.train.clone())?;
    partition_all(&rep, cfg.quantization, cfg.partition_rule)
}

/// AUCs on the test range, predicting snapshot `t` from the representation
/// at `t − 1` with the invariant-masked predictor.
pub fn evaluate(model: &Model, data: &PreparedData, cfg: &TrainConfig, mode: OodMode) -> Result<EvalMetrics> {
    let parts = eval_partitions(model, data, cfg)?;
    let rep = model.encoder.encode_window(&data.graph, 0..data.split.test.end - 1)?;
    let (mut pos, mut neg, mut ood_pos, mut ood_neg) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for t in data.split.test.clone() {
        let set = data
            .split
            .eval_set(t)
            .ok_or_else(|| Error::Data(format!("no evaluation set for snapshot {t}")))?;
        pos.extend(link_logits(&rep, t - 1, &set.positives, Some(&parts)));
        neg.extend(link_logits(&rep, t - 1, &set.negatives, Some(&parts)));
        ood_pos.extend(link_logits(&rep, t - 1, &data.ood_edges[t], Some(&parts)));
        ood_neg.extend(link_logits(&rep, t - 1, &data.ood_negatives[t], Some(&parts)));
    }
    if pos.is_empty() {
        return Err(Error::Data("test range has no positive links".into()));
    }
    let auc_no_ood = auc(&pos, &neg)?;
    let auc_ood = match mode {
        OodMode::Mixed => {
            if ood_pos.is_empty() {
                auc_no_ood
            } else {
                pos.extend(ood_pos);
                neg.extend(ood_neg);
                auc(&pos, &neg)?
            }
        }
        OodMode::OodOnly => auc(&ood_pos, &ood_neg)
            .map_err(|_| Error::Data("no held-out links to evaluate in ood_only mode".into()))?,
    };
    let i_acc = match &data.invariant_channels {
        Some(truth) if cfg.channels <= crate::metrics::I_ACC_MAX_CHANNELS => Some(i_acc(&parts, truth, cfg.channels)?),
        _ => None,
    };
    Ok(EvalMetrics { auc_no_ood, auc_ood, i_acc })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub auc_no_ood: f64,
    pub auc_ood: f64,
    pub i_acc: Option<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedResult>,
    pub auc_no_ood: Summary,
    pub auc_ood: Summary,
    pub i_acc: Option<Summary>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub const REPORT_FILE: &str = "report.json";

pub fn loss_curve_csv(history: &[LossReport]) -> String {
    let mut s = String::from("epoch,l_task,l_risk,l_ecvae,total,val_auc\n");
    for r in history {
        s += &format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.l_task, r.l_risk, r.l_ecvae, r.total, r.val_auc
        );
    }
    s
}

/// Trains and evaluates every seed. With `out_dir`, writes `report.json`,
/// `loss_seed{S}.csv` and `model_seed{S}.ckpt`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<MetricsReport> {
    cfg.validate()?;
    let data = prepare_data(&cfg.data)?;
    run_prepared(cfg, &data, out_dir)
}

/// [`run_experiment`] on already prepared data.
pub fn run_prepared(cfg: &ExperimentConfig, data: &PreparedData, out_dir: Option<&Path>) -> Result<MetricsReport> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let tc = cfg.train_for(seed);
        let outcome = fit(&data.graph, &data.split, &tc)?;
        let m = evaluate(&outcome.model, data, &tc, cfg.ood_mode)?;
        log::info!(
            "seed {seed}: best epoch {} of {}, auc {:.4} / ood {:.4}",
            outcome.best_epoch,
            outcome.history.len(),
            m.auc_no_ood,
            m.auc_ood
        );
        if let Some(dir) = out_dir {
            fs::write(dir.join(format!("loss_seed{seed}.csv")), loss_curve_csv(&outcome.history))?;
            let meta = CheckpointMeta {
                train: tc.clone(),
                input_dim: data.graph.features().map_or(0, |f| f.dim()),
                times: data.split.train.len(),
                split: [data.split.train.len(), data.split.val.len(), data.split.test.len()],
                data_seed: cfg.data.seed,
                best_epoch: outcome.best_epoch,
            };
            checkpoint::save(&dir.join(format!("model_seed{seed}.ckpt")), &meta, &outcome.model, &outcome.adam)?;
        }
        per_seed.push(SeedResult {
            seed,
            auc_no_ood: m.auc_no_ood,
            auc_ood: m.auc_ood,
            i_acc: m.i_acc,
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.history.len(),
        });
    }
    let col = |f: fn(&SeedResult) -> f64| per_seed.iter().map(f).collect::<Vec<_>>();
    let i_accs: Option<Vec<f64>> = per_seed.iter().map(|r| r.i_acc).collect();
    let report = MetricsReport {
        config: cfg.clone(),
        seeds: cfg.seeds.clone(),
        auc_no_ood: Summary::of(&col(|r| r.auc_no_ood)),
        auc_ood: Summary::of(&col(|r| r.auc_ood)),
        i_acc: i_accs.map(|v| Summary::of(&v)),
        per_seed,
    };
    if let Some(dir) = out_dir {
        fs::write(dir.join(REPORT_FILE), report.to_json()?)?;
    }
    Ok(report)
}

/// Evaluates a checkpoint on a dataset directory, using the split and
/// negative seed stored in the checkpoint.
pub fn evaluate_checkpoint(ckpt: &Path, data_dir: &Path, mode: OodMode) -> Result<EvalMetrics> {
    let ck = checkpoint::load(ckpt)?;
    let data = prepare_data(&DataConfig {
        path: Some(data_dir.to_path_buf()),
        protocol: None,
        split: ck.meta.split,
        seed: ck.meta.data_seed,
    })?;
    let dim = data.graph.features().map_or(0, |f| f.dim());
    if dim != ck.meta.input_dim {
        return Err(Error::Data(format!(
            "dataset features have dimension {dim}, checkpoint expects {}",
            ck.meta.input_dim
        )));
    }
    evaluate(&ck.model, &data, &ck.meta.train, mode)
}

/// Swept hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAxis {
    Alpha,
    Beta,
}

/// Parses `alpha`, `beta` or `alpha,beta`.
pub fn parse_grid(spec: &str) -> Result<Vec<GridAxis>> {
    let mut axes = Vec::new();
    for part in spec.split(',').map(str::trim) {
        let axis = match part {
            "alpha" => GridAxis::Alpha,
            "beta" => GridAxis::Beta,
            other => return Err(Error::Config(format!("unknown grid axis `{other}` (expected alpha or beta)"))),
        };
        if axes.contains(&axis) {
            return Err(Error::Config(format!("grid axis `{part}` listed twice")));
        }
        axes.push(axis);
    }
    Ok(axes)
}

/// `(α, β)` points: the full grid on swept axes, the configured value on
/// the others.
pub fn sweep_points(axes: &[GridAxis], base: &TrainConfig) -> Vec<(f64, f64)> {
    let alphas: Vec<f64> = if axes.contains(&GridAxis::Alpha) { ALPHA_GRID.to_vec() } else { vec![base.alpha] };
    let betas: Vec<f64> = if axes.contains(&GridAxis::Beta) { BETA_GRID.to_vec() } else { vec![base.beta] };
    alphas
        .iter()
        .flat_map(|&a| betas.iter().map(move |&b| (a, b)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub alpha: f64,
    pub beta: f64,
    pub auc_no_ood: Summary,
    pub auc_ood: Summary,
    pub best_val_epochs: Vec<usize>,
}

/// One experiment per grid point on shared data, ordered by the grid.
pub fn run_sweep(cfg: &ExperimentConfig, axes: &[GridAxis], out_dir: Option<&Path>) -> Result<Vec<SweepEntry>> {
    cfg.validate()?;
    let data = prepare_data(&cfg.data)?;
    let mut entries = Vec::new();
    for (alpha, beta) in sweep_points(axes, &cfg.train) {
        let mut c = cfg.clone();
        c.train.alpha = alpha;
        c.train.beta = beta;
        let sub = out_dir.map(|d| d.join(format!("alpha{alpha:e}_beta{beta:e}")));
        let r = run_prepared(&c, &data, sub.as_deref())?;
        entries.push(SweepEntry {
            alpha,
            beta,
            auc_no_ood: r.auc_no_ood,
            auc_ood: r.auc_ood,
            best_val_epochs: r.per_seed.iter().map(|s| s.best_epoch).collect(),
        });
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let by_point: BTreeMap<String, &SweepEntry> = entries
            .iter()
            .map(|e| (format!("alpha={:e},beta={:e}", e.alpha, e.beta), e))
            .collect();
        fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&by_point)? + "\n")?;
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seeds = [1, 2]
[data]
split = [6, 2, 2]
[data.protocol]
kind = "env_synthetic"
num_nodes = 30
"#;

    #[test]
    fn parses_minimal_config() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.train, TrainConfig::default());
        match cfg.data.protocol {
            Some(ShiftProtocol::EnvSynthetic(p)) => assert_eq!(p.num_nodes, 30),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lists_every_unknown_key() {
        let text = format!("{MINIMAL}bogus = 1\nnum_channels = 3\n[train]\nalpah = 1.0\n");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        for key in ["data.protocol.bogus", "data.protocol.num_channels", "train.alpah"] {
            assert!(msg.contains(key), "{msg}");
        }
    }

    #[test]
    fn path_required_for_non_generating_protocols() {
        let text = "[data]\nsplit = [1, 1, 1]\n";
        assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))));
    }

    #[test]
    fn grid_has_25_points() {
        let pts = sweep_points(&parse_grid("alpha,beta").unwrap(), &TrainConfig::default());
        assert_eq!(pts.len(), 25);
        assert_eq!(pts[0], (1e-3, 1e-6));
        assert_eq!(pts[24], (1e1, 1e-2));
        assert_eq!(sweep_points(&parse_grid("alpha").unwrap(), &TrainConfig::default()).len(), 5);
        assert!(parse_grid("gamma").is_err());
    }

    #[test]
    fn no_intervention_forces_alpha_zero() {
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.no_intervention = true;
        assert_eq!(cfg.train_for(3).alpha, 0.0);
        assert_eq!(cfg.train_for(3).seed, 3);
    }
}
