//! `dyngraph`: generate datasets, train, evaluate checkpoints and sweep α/β.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dyngraph_ood::experiment::{
    evaluate_checkpoint, parse_grid, run_experiment, run_sweep, ExperimentConfig, OodMode,
};
use dyngraph_ood::graph::{
    gen_env_synthetic, gen_feature_shift, load_dataset, write_dataset, DatasetMeta, DynamicGraph,
    EnvSyntheticParams, FeatureShiftParams, ShiftProtocol,
};
use dyngraph_ood::{Error, Result};

#[derive(Parser)]
#[command(name = "dyngraph", version, about = "Out-of-distribution link prediction on dynamic graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    /// Withhold links of one attribute until testing.
    Attribute,
    /// Append node features fitted to shifted link samples.
    FeatureShift,
    /// Multi-channel synthetic graph with known invariant channels.
    EnvSynthetic,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Mixed,
    OodOnly,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset directory (edges.csv, features.csv, meta.json).
    Generate {
        #[arg(long, value_enum)]
        protocol: Protocol,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Base dataset for `attribute` and `feature-shift`; a synthetic
        /// graph is generated when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        snapshots: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        sigma_e: Option<f64>,
        #[arg(long)]
        q_bar: Option<f64>,
        /// Withheld attribute (`attribute` protocol); defaults to the last
        /// synthetic channel.
        #[arg(long)]
        attribute: Option<u32>,
        #[arg(long)]
        p_bar: Option<f64>,
        #[arg(long)]
        p_bar_test: Option<f64>,
        /// First snapshot fed by test-time features (`feature-shift`);
        /// defaults to the last two snapshots.
        #[arg(long)]
        test_start: Option<usize>,
    },
    /// Train every configured seed and write report.json, loss curves and
    /// checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset directory and print JSON metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "mixed")]
        mode: Mode,
    },
    /// Run the α and/or β grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `alpha`, `beta` or `alpha,beta`.
        #[arg(long, default_value = "alpha,beta")]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn synthetic_params(
    nodes: Option<usize>,
    snapshots: Option<usize>,
    channels: Option<usize>,
    sigma_e: Option<f64>,
    q_bar: Option<f64>,
) -> EnvSyntheticParams {
    let d = EnvSyntheticParams::default();
    EnvSyntheticParams {
        num_nodes: nodes.unwrap_or(d.num_nodes),
        num_snapshots: snapshots.unwrap_or(d.num_snapshots),
        channels: channels.unwrap_or(d.channels),
        sigma_e: sigma_e.unwrap_or(d.sigma_e),
        q_bar: q_bar.unwrap_or(d.q_bar),
        ..d
    }
}

fn base_graph(input: Option<&Path>, params: &EnvSyntheticParams, seed: u64) -> Result<(DynamicGraph, DatasetMeta)> {
    match input {
        Some(dir) => load_dataset(dir),
        None => {
            let ds = gen_env_synthetic(params, seed)?;
            let meta = DatasetMeta {
                num_nodes: ds.graph.num_nodes(),
                num_snapshots: ds.graph.num_snapshots(),
                protocol: Some(ShiftProtocol::EnvSynthetic(params.clone())),
                seed,
                shifted_attribute: Some(ds.shifted_attribute),
                invariant_channels: Some(ds.invariant_channels),
                feature_dim: ds.graph.features().map(|f| f.dim()),
            };
            Ok((ds.graph, meta))
        }
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v).map_err(|e| Error::Config(e.to_string()))?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            protocol,
            out,
            seed,
            input,
            nodes,
            snapshots,
            channels,
            sigma_e,
            q_bar,
            attribute,
            p_bar,
            p_bar_test,
            test_start,
        } => {
            let params = synthetic_params(nodes, snapshots, channels, sigma_e, q_bar);
            params.validate()?;
            let (g, mut meta) = base_graph(input.as_deref(), &params, seed)?;
            let g = match protocol {
                Protocol::EnvSynthetic => {
                    if input.is_some() {
                        return Err(Error::Config("env-synthetic does not take --input".into()));
                    }
                    g
                }
                Protocol::Attribute => {
                    let a = attribute
                        .or(meta.shifted_attribute)
                        .ok_or_else(|| Error::Config("--attribute is required for this input".into()))?;
                    meta.protocol = Some(ShiftProtocol::AttributeFilter { attribute: a });
                    meta.shifted_attribute = Some(a);
                    g
                }
                Protocol::FeatureShift => {
                    let d = FeatureShiftParams::default();
                    let p = FeatureShiftParams {
                        p_bar: p_bar.unwrap_or(d.p_bar),
                        p_bar_test: p_bar_test.unwrap_or(d.p_bar_test),
                        test_start: Some(test_start.unwrap_or(g.num_snapshots().saturating_sub(2))),
                        ..d
                    };
                    let shifted = gen_feature_shift(&g, &p, seed)?;
                    meta.protocol = Some(ShiftProtocol::FeatureShift(p));
                    meta.shifted_attribute = None;
                    meta.feature_dim = shifted.features().map(|f| f.dim());
                    shifted
                }
            };
            meta.seed = seed;
            write_dataset(&out, &g, &meta)?;
            log::info!("wrote {} snapshots of {} nodes to {}", g.num_snapshots(), g.num_nodes(), out.display());
            Ok(())
        }
        Command::Train { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = run_experiment(&cfg, Some(&out))?;
            print_json(&report)
        }
        Command::Eval { checkpoint, data, mode } => {
            let mode = match mode {
                Mode::Mixed => OodMode::Mixed,
                Mode::OodOnly => OodMode::OodOnly,
            };
            print_json(&evaluate_checkpoint(&checkpoint, &data, mode)?)
        }
        Command::Sweep { config, grid, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let axes = parse_grid(&grid)?;
            print_json(&run_sweep(&cfg, &axes, out.as_deref())?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
