use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};
use tokenflow_core::harness::{self, RunConfig, CONFIG_KEYS};

#[derive(Parser)]
#[command(name = "tokenflow", version, about = "Budgeted multi-modal transformer with learned token routing")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` config file; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    gamma_prime: Option<f64>,
    /// FLOPs budget; replaces --gamma-prime with the implied keep ratio.
    #[arg(long, global = true)]
    budget_flops: Option<f64>,
    /// none, freeze_tokenizers, random_routing or uniform_ratio(p)
    #[arg(long, global = true)]
    ablation: Option<String>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// beam, beam:<classes> or handover
    #[arg(long, global = true)]
    task: Option<String>,
    /// tiny, desk or full
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    seeds: Option<usize>,
    #[arg(long, global = true)]
    scenarios: Option<usize>,
    #[arg(long, global = true)]
    frames: Option<usize>,
    /// Any config key, repeatable: --set batch=8
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Simulate scenarios and write a dataset directory.
    Generate,
    /// Train with the budgeted loss; writes checkpoint, metrics and keep ratios.
    Train,
    /// Score a checkpoint on the validation split.
    Eval,
    /// Median batch-1 latency and FLOPs at trained and forced keep ratios.
    Benchmark,
    /// Proposed model against the three ablations.
    Ablate,
    /// List the config file keys.
    Keys,
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    let flags: [(&str, Option<String>); 14] = [
        ("seed", cli.seed.map(|v| v.to_string())),
        ("gamma_prime", cli.gamma_prime.map(|v| v.to_string())),
        ("budget_flops", cli.budget_flops.map(|v| v.to_string())),
        ("ablation", cli.ablation.clone()),
        ("out", cli.out.as_ref().map(|p| p.display().to_string())),
        ("dataset", cli.dataset.as_ref().map(|p| p.display().to_string())),
        ("checkpoint", cli.checkpoint.as_ref().map(|p| p.display().to_string())),
        ("task", cli.task.clone()),
        ("model", cli.model.clone()),
        ("epochs", cli.epochs.map(|v| v.to_string())),
        ("lr", cli.lr.map(|v| v.to_string())),
        ("seeds", cli.seeds.map(|v| v.to_string())),
        ("scenarios", cli.scenarios.map(|v| v.to_string())),
        ("frames", cli.frames.map(|v| v.to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    for kv in &cli.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let cfg = run_config(&cli)?;
    match cli.command {
        Command::Generate => {
            let summary = harness::run_generate(&cfg)?;
            let manifest = fs::read(cfg.dataset.join("manifest.json"))?;
            let mut out = serde_json::to_value(&summary)?;
            out["manifest_sha256"] = hex::encode(Sha256::digest(&manifest)).into();
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Train => {
            let records = harness::run_train(&cfg)?;
            for r in &records {
                log::info!("seed {}: {:?}, keep ratios {:?}", r.seed, r.eval, r.keep_ratios);
            }
            println!("{}", serde_json::to_string_pretty(&records)?);
        }
        Command::Eval => {
            let report = harness::run_eval(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Benchmark => {
            let rows = harness::run_benchmark(&cfg)?;
            print!("{}", harness::bench_csv(&rows));
        }
        Command::Ablate => {
            let rows = harness::run_ablate(&cfg)?;
            print!("{}", harness::ablation_csv(&rows));
        }
        Command::Keys => {
            for (k, doc) in CONFIG_KEYS {
                println!("{k:<14} {doc}");
            }
        }
    }
    Ok(())
}
