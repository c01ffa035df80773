//! End-to-end runs of the `dyngraph` binary and its exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dyngraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dyngraph"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn train(cfg: &str, tmp: &Path) -> Output {
    dyngraph(&["train", "--config", cfg, "--out", tmp.join("run").to_str().unwrap()])
}

fn generate(dir: &Path) {
    let out = dyngraph(&[
        "generate",
        "--protocol",
        "env-synthetic",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "5",
        "--nodes",
        "30",
        "--snapshots",
        "6",
        "--channels",
        "3",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn config(dir: &Path, data: &Path, extra: &str) -> String {
    let path = dir.join("exp.toml");
    fs::write(
        &path,
        format!(
            "seeds = [1]\n{extra}\n[data]\npath = {:?}\nsplit = [3, 1, 2]\nseed = 5\n\n[train]\nchannels = 3\nhidden_dim = 4\nlatent_dim = 2\necvae_hidden = 8\nlibrary_size = 32\nmax_epochs = 2\n",
            data.to_str().unwrap()
        ),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn generate_train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data);
    for f in ["edges.txt", "features.csv", "meta.json"] {
        assert!(data.join(f).exists(), "{f} missing");
    }
    let cfg = config(tmp.path(), &data, "");
    let run = tmp.path().join("run");
    let out = dyngraph(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let auc = report["per_seed"][0]["auc_ood"].as_f64().unwrap();

    let ckpt = run.join("model_seed1.ckpt");
    let out = dyngraph(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(metrics["auc_ood"].as_f64().unwrap(), auc);
}

#[test]
fn sweep_over_one_axis() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data);
    let cfg = config(tmp.path(), &data, "");
    let out_dir = tmp.path().join("sweep");
    let out = dyngraph(&["sweep", "--config", &cfg, "--grid", "beta", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let entries: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(entries.as_array().map(Vec::len).or_else(|| entries.as_object().map(|o| o.len())), Some(5));
    assert!(out_dir.join("sweep.json").exists());
}

#[test]
fn configuration_problems_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data);
    let cfg = config(tmp.path(), &data, "unknown_knob = 3");
    assert_eq!(code(&train(&cfg, tmp.path())), 2);
    let missing = tmp.path().join("nope.toml");
    assert_eq!(code(&train(missing.to_str().unwrap(), tmp.path())), 2);
    assert_eq!(code(&dyngraph(&["sweep", "--config", &config(tmp.path(), &data, ""), "--grid", "gamma"])), 2);
    assert_eq!(code(&dyngraph(&["train"])), 2);
}

#[test]
fn data_problems_exit_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data);
    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, b"garbage").unwrap();
    let out = dyngraph(&["eval", "--checkpoint", bad.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    fs::write(data.join("edges.txt"), "0 1 not-a-snapshot\n").unwrap();
    let cfg = config(tmp.path(), &data, "");
    assert_eq!(code(&train(&cfg, tmp.path())), 3);
}

#[test]
fn non_finite_values_exit_with_4() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data);
    let feats = fs::read_to_string(data.join("features.csv")).unwrap();
    let mut lines: Vec<String> = feats.lines().map(str::to_string).collect();
    let mut fields: Vec<String> = lines[1].split(',').map(str::to_string).collect();
    fields[2] = "NaN".into();
    lines[1] = fields.join(",");
    fs::write(data.join("features.csv"), lines.join("\n") + "\n").unwrap();
    let cfg = config(tmp.path(), &data, "");
    let out = train(&cfg, tmp.path());
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}
