//! `ninlab` — noise-injection training laboratory CLI.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ninlab::config::KvConfig;
use ninlab::manifest::RunManifest;
use ninlab::presets::{apply_overrides, apply_scale, preset_names, resolve_preset,
    validate, ExperimentConfig};
use ninlab::runner;
use ninlab::Error;

#[derive(Parser)]
#[command(name = "ninlab", version, about = "Noise-injection regularization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Precedence: preset defaults < config
/// file < these flags; `--scale` is applied after everything else.
#[derive(Args)]
struct Common {
    /// Preset name (see `--list` on any subcommand for choices).
    #[arg(long)]
    preset: Option<String>,
    /// Key=value config file, or a manifest.json from a previous run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Desk-scale factor in (0,1]: multiplies hidden widths and train size.
    #[arg(long)]
    scale: Option<f64>,
    /// Seed list (repeatable or comma-separated).
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Output directory root.
    #[arg(long)]
    out: Option<String>,
    /// Worker threads for fanning out seeds (1 = reference mode).
    #[arg(long)]
    threads: Option<usize>,
    /// List available presets and exit.
    #[arg(long)]
    list: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train per seed; emits trace CSVs, checkpoints, and a manifest.
    Train(Common),
    /// Evaluate a checkpoint: corruption, FGSM/PGD, and domain shift.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint JSON (from `train`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Linear toy model: trajectory, phase sweep, divergence boundary.
    Toy(Common),
    /// Classify training traces into decoupled/decay/catapult/divergent.
    Phases(Common),
}

fn resolve(common: &Common) -> Result<ExperimentConfig, Error> {
    // A manifest.json is accepted anywhere a config file is: its embedded
    // snapshot is already fully resolved, which is the rerun contract.
    let mut cfg = match &common.config {
        Some(path) if path.extension().map(|e| e == "json").unwrap_or(false) => {
            let manifest = RunManifest::load(path)?;
            manifest.config
        }
        Some(path) => {
            let mut kv = KvConfig::load(path)?;
            let preset = kv
                .get_string("preset")
                .or_else(|| common.preset.clone())
                .ok_or_else(|| Error::Config("no preset given (flag or config key)".into()))?;
            let mut cfg = resolve_preset(&preset)?;
            apply_overrides(&mut cfg, &mut kv)?;
            cfg
        }
        None => {
            let preset = common
                .preset
                .clone()
                .ok_or_else(|| Error::Config("--preset or --config is required".into()))?;
            resolve_preset(&preset)?
        }
    };
    if let Some(scale) = common.scale {
        cfg.scale = scale;
    }
    if !common.seed.is_empty() {
        cfg.seeds = common.seed.clone();
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(threads) = common.threads {
        cfg.threads = threads;
    }
    validate(&cfg)?;
    apply_scale(&mut cfg);
    Ok(cfg)
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Train(c) | Command::Toy(c) | Command::Phases(c) => c,
        Command::Eval { common, .. } => common,
    };
    if common.list {
        for name in preset_names() {
            println!("{name}");
        }
        return Ok(());
    }
    let cfg = resolve(common)?;
    let manifest_path = match &cli.command {
        Command::Train(_) => runner::cmd_train(&cfg)?,
        Command::Eval { checkpoint, .. } => {
            let ckpt = checkpoint
                .clone()
                .ok_or_else(|| Error::Config("eval requires --checkpoint".into()))?;
            runner::cmd_eval(&cfg, &ckpt)?
        }
        Command::Toy(_) => runner::cmd_toy(&cfg)?,
        Command::Phases(_) => runner::cmd_phases(&cfg)?,
    };
    println!("wrote {}", manifest_path.display());
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Config(_) | Error::Format(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
