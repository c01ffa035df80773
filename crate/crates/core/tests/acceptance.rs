//! Acceptance checks, run without the libtest harness so every
//! `criterion N: PASS|FAIL` line reaches the console. Tolerances are the
//! constants below.
//!
//! The synthetic trend check (criterion 7) reports its verdict without
//! failing the run unless `ACCEPTANCE_STRICT=1` is set; its runtime budget
//! and the sanity of its outputs are always enforced.

mod common;

use std::time::{Duration, Instant};

use common::{gradcheck, random_graph, uniform};
use dyngraph_ood::cvae::{gaussian_kl, reparameterize_value, EcvaeConfig, EcvaeModel, EcvaeVars, EnvSampleLibrary, EnvSamples};
use dyngraph_ood::encoder::{eaconv_forward, AttentionAxis, Encoder, EncoderConfig, LayerInput, LayerVars};
use dyngraph_ood::experiment::{run_experiment, sweep_points, ExperimentConfig, GridAxis, MetricsReport};
use dyngraph_ood::graph::{chronological_split, Edge, ShiftProtocol};
use dyngraph_ood::invariance::{brute_force_delta, dp_delta, partition, InvariantPartition, PartitionRule, VarianceProfile};
use dyngraph_ood::metrics::{auc, spearman};
use dyngraph_ood::nn::MlpVars;
use dyngraph_ood::rng::Rng;
use dyngraph_ood::tensor::{AdamState, ReduceOp, Tape, Tensor, Var};
use dyngraph_ood::train::{fit, intervene, task_loss_tape, InterventionPlan, TrainConfig, TrainPair};
use dyngraph_ood::Result;

const Q: u64 = 1000;
const DP_CASES: usize = 1000;
const DP_MAX_K: usize = 12;
const DP_BUDGET: Duration = Duration::from_secs(5);
const GRAD_TOL: f64 = 1e-4;
const ATTN_TOL: f64 = 1e-9;
const KL_DRAWS: usize = 100_000;
const KL_REL_TOL: f64 = 0.02;
const MSE_DROP: f64 = 0.5;
const MSE_EPOCHS: usize = 200;
const TREND_BUDGET: Duration = Duration::from_secs(600);
const ABLATION_MARGIN: f64 = 0.02;
const SIGMA_MARGIN: f64 = 0.05;
const SIGMAS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
const TREND_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const AUC_CASES: usize = 100;
const AUC_TOL: f64 = 1e-12;

fn verdict(n: u32, ok: bool, detail: &str) {
    println!("criterion {n}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
}

fn strict() -> bool {
    std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1")
}

fn criterion_01_dp_matches_exhaustive_search() {
    let mut rng = Rng::new(1);
    let start = Instant::now();
    let mut mismatches = 0;
    for _ in 0..DP_CASES {
        let k = 1 + rng.below(DP_MAX_K);
        let p = VarianceProfile::new((0..k).map(|_| rng.uniform()).collect()).unwrap();
        if dp_delta(&p, Q).unwrap().0 != brute_force_delta(&p, Q).unwrap() {
            mismatches += 1;
        }
    }
    let took = start.elapsed();
    let ok = mismatches == 0 && took < DP_BUDGET;
    verdict(1, ok, &format!("{mismatches} mismatches in {DP_CASES} profiles, {took:.2?}"));
    assert!(ok);
}

fn criterion_02_worked_example() {
    let p = VarianceProfile::new(vec![0.1, 0.2, 0.3, 0.4, 0.9]).unwrap();
    let (delta, subset) = dp_delta(&p, Q).unwrap();
    let threshold = partition(&p, delta, PartitionRule::Threshold);
    let by_subset = partition(&p, delta, PartitionRule::Subset);
    let ok = (delta - 0.1).abs() < 1e-12
        && subset == vec![4]
        && threshold.invariant == vec![0, 1, 2]
        && by_subset.invariant == vec![0, 1, 2, 3];
    verdict(
        2,
        ok,
        &format!(
            "delta {delta}, dp subset {subset:?}, threshold invariant {:?}, subset-rule invariant {:?}",
            threshold.invariant, by_subset.invariant
        ),
    );
    assert!(ok);
}

fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut Rng::new(seed)));
    let p = tape.mul(x, w)?;
    Ok(tape.sum_all(p))
}

fn criterion_03_gradients_match_finite_differences() {
    let mut rng = Rng::new(3);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let a = uniform(&[3, 4], &mut rng);
    let b = uniform(&[4, 2], &mut rng);
    let row = uniform(&[4], &mut rng);
    let pos = Tensor::uniform(&[3, 4], 0.5, 2.0, &mut rng);

    worst.push(("matmul", gradcheck(&[a.clone(), b], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, 1)
    })));
    worst.push(("elementwise", gradcheck(&[a.clone(), row, pos], |t, v| {
        let s = t.add(v[0], v[1])?;
        let m = t.mul(s, v[0])?;
        let d = t.div(m, v[2])?;
        let e = t.sub(d, v[1])?;
        let sg = t.sigmoid(e);
        let lr = t.leaky_relu(e);
        let sp = t.softplus(lr);
        let ex = t.exp(sg);
        let lg = t.log(ex);
        let sq = t.square(sp);
        let o = t.add(lg, sq)?;
        let o = t.mul_scalar(o, 0.3);
        let o = t.add_scalar(o, 1.0);
        project(t, o, 2)
    })));
    worst.push(("softmax", gradcheck(std::slice::from_ref(&a), |t, v| {
        let y0 = t.softmax(v[0], 0)?;
        let y1 = t.softmax(v[0], 1)?;
        let y = t.add(y0, y1)?;
        project(t, y, 3)
    })));
    worst.push(("reductions", gradcheck(&[a], |t, v| {
        let s = t.reduce(ReduceOp::Sum, v[0], Some(0))?;
        let m = t.reduce(ReduceOp::Mean, v[0], Some(1))?;
        let va = t.reduce(ReduceOp::Variance, v[0], Some(1))?;
        let s = project(t, s, 4)?;
        let m = project(t, m, 5)?;
        let va = project(t, va, 6)?;
        let x = t.add(s, m)?;
        t.add(x, va)
    })));

    let g = random_graph(8, 2, 10, 4, 3);
    let (src, dst) = g.message_lists(1);
    let x = Tensor::new(vec![8, 4], g.features().unwrap().snapshot(1).to_vec()).unwrap();
    let mut conv_in = Vec::new();
    for _ in 0..3 {
        conv_in.push(Tensor::uniform(&[4, 3], -0.5, 0.5, &mut rng));
        conv_in.push(Tensor::uniform(&[3], -0.5, 0.5, &mut rng));
    }
    conv_in.push(x);
    for axis in [AttentionAxis::Channels, AttentionAxis::Neighbors] {
        worst.push(("eaconv", gradcheck(&conv_in, |t, v| {
            let lv = LayerVars {
                weights: vec![v[0], v[2], v[4]],
                biases: vec![v[1], v[3], v[5]],
            };
            let o = eaconv_forward(t, &lv, LayerInput::Shared(v[6]), &src, &dst, axis)?;
            project(t, o.z_hat, 7)
        })));
    }

    let model = EcvaeModel::new(
        EcvaeConfig { sample_dim: 3, latent_dim: 2, hidden_dim: 4, channels: 3, times: 2 },
        5,
    )
    .unwrap();
    let params: Vec<Tensor> = model.parameters().into_iter().cloned().collect();
    let z = Tensor::uniform(&[5, 3], 0.0, 1.0, &mut rng);
    let eps = Tensor::randn(&[5, 2], &mut rng);
    let labels = [0, 5, 2, 3, 1];
    worst.push(("ecvae", gradcheck(&params, |t, v| {
        let mlp = |s: &[Var]| MlpVars(s.chunks(2).map(|c| (c[0], c[1])).collect());
        let vars = EcvaeVars { recognition: mlp(&v[0..6]), prior: mlp(&v[6..12]), decoder: mlp(&v[12..18]) };
        Ok(model.loss_terms(t, &vars, &z, &labels, &eps)?.total)
    })));

    let zr = Tensor::uniform(&[6, 2, 3, 2], 0.0, 1.0, &mut rng);
    let e = |u, v| Edge::new(u, v).unwrap();
    let pairs = vec![
        TrainPair { t: 0, positives: vec![e(0, 1), e(2, 5)], negatives: vec![e(0, 3), e(1, 4)] },
        TrainPair { t: 1, positives: vec![e(3, 4)], negatives: vec![e(2, 3)] },
    ];
    let mask = Tensor::new(vec![6, 6], (0..36).map(|i| f64::from(i % 4 != 1)).collect()).unwrap();
    worst.push(("task loss", gradcheck(std::slice::from_ref(&zr), |t, v| {
        let m = t.constant(mask.clone());
        task_loss_tape(t, v[0], &pairs, Some(m))
    })));
    let plans: Vec<InterventionPlan> = (0..3)
        .map(|s| InterventionPlan { spans: vec![(2 + 2 * s, 2)], values: vec![0.2 * s as f64, 0.5] })
        .collect();
    worst.push(("risk loss", gradcheck(&[zr], |t, v| {
        let mut cols = Vec::new();
        for p in &plans {
            let zi = p.apply_tape(t, v[0])?;
            let l = task_loss_tape(t, zi, &pairs, None)?;
            cols.push(t.reshape(l, &[1])?);
        }
        let stacked = t.concat(&cols, 0)?;
        t.reduce(ReduceOp::Variance, stacked, None)
    })));

    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let ok = max < GRAD_TOL;
    let detail: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict(3, ok, &format!("max relative error {max:.1e}; {}", detail.join(", ")));
    assert!(ok);
}

fn criterion_04_attention_is_normalized() {
    let g = random_graph(50, 3, 150, 8, 4);
    let enc = Encoder::new(
        &EncoderConfig { input_dim: 8, hidden_dim: 16, layers: 2, channels: 5, attention: AttentionAxis::Channels },
        4,
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    let mut edges = 0;
    for (_, _, a) in enc.attention_trace(&g).unwrap() {
        for row in a.data().chunks(5) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            edges += 1;
        }
    }
    let ok = worst <= ATTN_TOL && edges > 0;
    verdict(4, ok, &format!("{edges} edge rows, max |sum - 1| = {worst:.1e}"));
    assert!(ok);
}

fn criterion_05_intervention_integrity() {
    let (n, t_count, k_count, d) = (30, 4, 5, 3);
    let mut rng = Rng::new(5);
    let z = Tensor::uniform(&[n, t_count, k_count, d], 0.0, 1.0, &mut rng);
    let parts: Vec<InvariantPartition> = (0..n)
        .map(|_| {
            let (inv, var): (Vec<usize>, Vec<usize>) = (0..k_count).partition(|_| rng.bernoulli(0.5));
            InvariantPartition { invariant: inv, variant: var }
        })
        .collect();
    let mut lib = EnvSampleLibrary { observed: EnvSamples::new(d), generated: EnvSamples::new(d) };
    for i in 0..40 {
        let s: Vec<f64> = (0..d).map(|_| 5.0 + rng.uniform()).collect();
        if i % 2 == 0 {
            lib.observed.push(&s, i);
        } else {
            lib.generated.push(&s, i);
        }
    }
    let out = intervene(&z, &parts, &lib, 1.0, 0.5, 6).unwrap();
    let (mut kept, mut replaced, mut bad) = (0, 0, 0);
    for v in 0..n {
        for t in 0..t_count {
            for k in 0..k_count {
                let off = ((v * t_count + t) * k_count + k) * d;
                let (before, after) = (&z.data()[off..off + d], &out.data()[off..off + d]);
                if parts[v].is_invariant(k) {
                    kept += 1;
                    if before.iter().zip(after).any(|(a, b)| a.to_bits() != b.to_bits()) {
                        bad += 1;
                    }
                } else {
                    replaced += 1;
                    if !lib.contains(after) {
                        bad += 1;
                    }
                }
            }
        }
    }
    let ok = bad == 0 && kept > 0 && replaced > 0;
    verdict(5, ok, &format!("{kept} invariant slices kept, {replaced} replaced, {bad} violations"));
    assert!(ok);
}

fn criterion_06_ecvae_sanity() {
    // KL against a Monte Carlo estimate of E_q[log q − log p].
    let (mu_q, lv_q, mu_p, lv_p) = ([0.3, -0.5, 1.0], [-0.4, 0.2, 0.1], [0.0, 0.1, 0.4], [0.3, -0.2, 0.0]);
    let analytic = gaussian_kl(&mu_q, &lv_q, &mu_p, &lv_p);
    let log_n = |x: f64, mu: f64, lv: f64| -0.5 * (lv + (x - mu).powi(2) / lv.exp() + (2.0 * std::f64::consts::PI).ln());
    let mut rng = Rng::new(6);
    let mut acc = 0.0;
    for _ in 0..KL_DRAWS {
        for i in 0..3 {
            let x = reparameterize_value(mu_q[i], lv_q[i], rng.normal());
            acc += log_n(x, mu_q[i], lv_q[i]) - log_n(x, mu_p[i], lv_p[i]);
        }
    }
    let mc = acc / KL_DRAWS as f64;
    let kl_err = (mc - analytic).abs() / analytic;

    // Reconstruction on a fixed toy sample set.
    let mut m = EcvaeModel::new(
        EcvaeConfig { sample_dim: 4, latent_dim: 2, hidden_dim: 16, channels: 2, times: 4 },
        6,
    )
    .unwrap();
    let labels: Vec<usize> = (0..8).collect();
    let z = Tensor::new(
        vec![8, 4],
        labels
            .iter()
            .flat_map(|&l| { let x = l as f64 / 8.0; [x, 1.0 - x, x * x, 0.5] })
            .collect(),
    )
    .unwrap();
    let zero = Tensor::zeros(&[8, 2]);
    let first = m.loss_value(&z, &labels, &zero).unwrap().1;
    let mut adam = AdamState::new(0.01, m.parameters());
    for _ in 0..MSE_EPOCHS {
        let eps = Tensor::randn(&[8, 2], &mut rng);
        let mut tape = Tape::new();
        let vars = m.register(&mut tape);
        let terms = m.loss_terms(&mut tape, &vars, &z, &labels, &eps).unwrap();
        let grads = tape.backward(terms.total).unwrap();
        for (v, p) in vars.vars().into_iter().zip(m.parameters_mut()) {
            grads.apply_to(v, p).unwrap();
        }
        adam.step(m.parameters_mut()).unwrap();
    }
    let last = m.loss_value(&z, &labels, &zero).unwrap().1;
    let ok = kl_err < KL_REL_TOL && last <= (1.0 - MSE_DROP) * first;
    verdict(
        6,
        ok,
        &format!("KL analytic {analytic:.5} vs MC {mc:.5} (rel {kl_err:.2e}); MSE {first:.4} -> {last:.4}"),
    );
    assert!(ok);
}

fn trend_config(sigma: f64, ablation: bool) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(
        r#"
        [data]
        split = [6, 2, 2]
        seed = 0
        [data.protocol]
        kind = "env_synthetic"
        num_nodes = 400
        num_snapshots = 10
        channels = 5
        [train]
        max_epochs = 30
        patience = 10
        library_size = 1024
        ecvae_batch = 256
        "#,
    )
    .unwrap();
    if let Some(ShiftProtocol::EnvSynthetic(p)) = &mut cfg.data.protocol {
        p.sigma_e = sigma;
    }
    cfg.seeds = TREND_SEEDS.to_vec();
    cfg.no_intervention = ablation;
    cfg
}

fn criterion_07_synthetic_ood_trend() {
    let start = Instant::now();
    let mut reports: Vec<(f64, MetricsReport)> = Vec::new();
    for sigma in SIGMAS {
        reports.push((sigma, run_experiment(&trend_config(sigma, false), None).unwrap()));
    }
    let ablation = run_experiment(&trend_config(0.6, true), None).unwrap();
    let took = start.elapsed();

    let auc_at = |s: f64| reports.iter().find(|r| r.0 == s).unwrap().1.auc_ood.mean;
    let aucs: Vec<f64> = reports.iter().map(|r| r.1.auc_ood.mean).collect();
    let iaccs: Vec<f64> = reports.iter().map(|r| r.1.i_acc.unwrap().mean).collect();
    for (s, r) in &reports {
        println!(
            "  sigma_e {s}: auc_ood {:.4} ± {:.4}, auc_no_ood {:.4}, i_acc {:.3}, epochs {:?}",
            r.auc_ood.mean,
            r.auc_ood.std,
            r.auc_no_ood.mean,
            r.i_acc.unwrap().mean,
            r.per_seed.iter().map(|p| p.epochs_run).collect::<Vec<_>>()
        );
    }
    println!("  ablation (alpha = 0) at sigma_e 0.6: auc_ood {:.4} ± {:.4}", ablation.auc_ood.mean, ablation.auc_ood.std);

    let gap_a = auc_at(0.6) - ablation.auc_ood.mean;
    let gap_b = auc_at(1.0) - auc_at(0.2);
    let rho = spearman(&iaccs, &aucs);
    let a = gap_a >= ABLATION_MARGIN;
    let b = gap_b >= SIGMA_MARGIN;
    let c = matches!(rho, Ok(r) if r > 0.0);
    let in_budget = took < TREND_BUDGET;
    let ok = a && b && c && in_budget;
    let mark = |x: bool| if x { "ok" } else { "miss" };
    verdict(
        7,
        ok,
        &format!(
            "(a) full - ablation {gap_a:+.4} [{}], (b) auc(1.0) - auc(0.2) {gap_b:+.4} [{}], (c) spearman {} [{}], {took:.0?} [{}]",
            mark(a),
            mark(b),
            rho.map_or_else(|e| format!("undefined: {e}"), |r| format!("{r:+.3}")),
            mark(c),
            mark(in_budget)
        ),
    );
    let sane = aucs.iter().chain(&iaccs).all(|x| (0.0..=1.0).contains(x));
    assert!(sane && in_budget, "trend run out of budget or produced invalid metrics");
    if strict() {
        assert!(ok);
    }
}

fn criterion_08_auc_matches_pairwise_oracle() {
    let hand = auc(&[0.8, 0.4], &[0.5, 0.1]).unwrap();
    let mut rng = Rng::new(8);
    let mut worst: f64 = 0.0;
    for _ in 0..AUC_CASES {
        let draw = |rng: &mut Rng| {
            let n = 1 + rng.below(50);
            // Coarse values so ties occur.
            (0..n).map(|_| (rng.uniform() * 10.0).floor() / 10.0).collect::<Vec<f64>>()
        };
        let (pos, neg) = (draw(&mut rng), draw(&mut rng));
        let mut wins = 0.0;
        for p in &pos {
            for q in &neg {
                wins += if p > q { 1.0 } else if p == q { 0.5 } else { 0.0 };
            }
        }
        let oracle = wins / (pos.len() * neg.len()) as f64;
        worst = worst.max((auc(&pos, &neg).unwrap() - oracle).abs());
    }
    let ok = hand == 0.75 && worst <= AUC_TOL;
    verdict(8, ok, &format!("hand case {hand}, max deviation {worst:.1e} over {AUC_CASES} sets"));
    assert!(ok);
}

fn criterion_09_reports_are_deterministic() {
    let mut cfg = trend_config(0.6, false);
    if let Some(ShiftProtocol::EnvSynthetic(p)) = &mut cfg.data.protocol {
        p.num_nodes = 60;
    }
    cfg.seeds = vec![3];
    cfg.train.max_epochs = 3;
    let a = run_experiment(&cfg, None).unwrap().to_json().unwrap();
    let b = run_experiment(&cfg, None).unwrap().to_json().unwrap();
    let ok = a.as_bytes() == b.as_bytes();
    verdict(9, ok, &format!("{} byte reports", a.len()));
    assert!(ok);
}

fn criterion_10_protocol_defaults_and_grid() {
    let d = TrainConfig::default();
    let defaults_ok = d.max_epochs == 1000 && d.patience == 50;

    // A tiny graph whose validation AUC never changes stops after
    // 1 + patience epochs, and an unlimited patience hits the epoch cap.
    let n = 8;
    let recs = (0..4).flat_map(|s| (0..n).map(move |v| (s, v, (v + 1) % n, None)));
    let mut f = dyngraph_ood::graph::Features::zeros(n, 4, 2);
    for s in 0..4 {
        for v in 0..n {
            f.row_mut(s, v).copy_from_slice(&[0.5, 0.5]);
        }
    }
    let g = dyngraph_ood::graph::DynamicGraph::from_records(n, 4, recs).unwrap().with_features(f).unwrap();
    let split = chronological_split(&g, 2, 1, 1, 0).unwrap();
    let tiny = TrainConfig {
        channels: 1,
        hidden_dim: 2,
        latent_dim: 1,
        ecvae_hidden: 2,
        interventions: 1,
        library_size: Some(1),
        ..TrainConfig::default()
    };
    let by_patience = fit(&g, &split, &tiny).unwrap().history.len();
    let capped = fit(&g, &split, &TrainConfig { patience: usize::MAX, ..tiny }).unwrap().history.len();

    let pts = sweep_points(&[GridAxis::Alpha, GridAxis::Beta], &d);
    let mut expected = Vec::new();
    for a in [1e-3, 1e-2, 1e-1, 1e0, 1e1] {
        for b in [1e-6, 1e-5, 1e-4, 1e-3, 1e-2] {
            expected.push((a, b));
        }
    }
    let ok = defaults_ok && by_patience == 51 && capped == 1000 && pts == expected;
    verdict(
        10,
        ok,
        &format!(
            "defaults {}/{}, frozen run stopped after {by_patience} epochs, uncapped patience ran {capped}, grid {} points",
            d.max_epochs,
            d.patience,
            pts.len()
        ),
    );
    assert!(ok);
}

fn main() {
    let checks: [(&str, fn()); 10] = [
        ("dp_matches_exhaustive_search", criterion_01_dp_matches_exhaustive_search),
        ("worked_example", criterion_02_worked_example),
        ("gradients_match_finite_differences", criterion_03_gradients_match_finite_differences),
        ("attention_is_normalized", criterion_04_attention_is_normalized),
        ("intervention_integrity", criterion_05_intervention_integrity),
        ("ecvae_sanity", criterion_06_ecvae_sanity),
        ("synthetic_ood_trend", criterion_07_synthetic_ood_trend),
        ("auc_matches_pairwise_oracle", criterion_08_auc_matches_pairwise_oracle),
        ("reports_are_deterministic", criterion_09_reports_are_deterministic),
        ("protocol_defaults_and_grid", criterion_10_protocol_defaults_and_grid),
    ];
    // `cargo test -- --list` and name filters behave like the default harness.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (name, _) in &checks {
            println!("{name}: test");
        }
        return;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (name, check) in checks {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        if std::panic::catch_unwind(check).is_err() {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        eprintln!("acceptance failures: {failed:?}");
        std::process::exit(1);
    }
}
