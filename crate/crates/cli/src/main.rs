//! `qviton`: synthesize data, train, evaluate, verify gradients, predict.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or config error,
//! 3 numerical abort.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use log::info;

use qviton::checkpoint;
use qviton::config::{Preset, RunConfig};
use qviton::data::{synth_generate, Split, SynthConfig, CLASS_NAMES};
use qviton::numerics::Precision;
use qviton::session::{self, RunOptions};
use qviton::verify::{self, Scope};
use qviton::Error;

#[derive(Parser)]
#[command(name = "qviton", version, about = "Hybrid quantum-classical ViT flood classifier")]
struct Cli {
    /// Worker threads for data loading and batch evaluation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic, separable flood dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        regions: usize,
        /// Tiles per region.
        #[arg(long, default_value_t = 8)]
        tiles: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Tile side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train a model.
    Train {
        /// JSON config layered over a preset. Without it the preset is used
        /// as is.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_preset, default_value = "toy", conflicts_with = "config")]
        preset: Preset,
        /// Overrides `data.root`.
        #[arg(long)]
        data_root: Option<PathBuf>,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs in this invocation.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on one split of its dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: Split,
        /// Dataset root, if it moved since training.
        #[arg(long)]
        data_root: Option<PathBuf>,
        /// Where to write the confusion matrix (default: next to the checkpoint).
        #[arg(long)]
        confusion: Option<PathBuf>,
    },
    /// Run finite-difference and oracle checks.
    Gradcheck {
        #[arg(long, value_parser = parse_scope, default_value = "all")]
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Classify one raster tile.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tile: PathBuf,
    },
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    match s {
        "toy" => Ok(Preset::Toy),
        "paper" => Ok(Preset::Paper),
        _ => Err(format!("expected `toy` or `paper`, got `{s}`")),
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse::<Split>().map_err(|e| e.to_string())
}

fn parse_scope(s: &str) -> Result<Scope, String> {
    s.parse::<Scope>().map_err(|e| e.to_string())
}

/// Why a command failed, mapped onto an exit code.
enum Failure {
    Verification(Vec<String>),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Other(e.into())
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::NonFinite(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global() {
            eprintln!("error: cannot set up {} workers: {e}", cli.workers);
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(offenders)) => {
            eprintln!("verification failed:");
            for o in offenders {
                eprintln!("  {o}");
            }
            ExitCode::from(1)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth {
            out,
            regions,
            tiles,
            seed,
            size,
        } => {
            let cfg = SynthConfig {
                regions,
                tiles_per_region: tiles,
                size,
                seed,
            };
            let paths = synth_generate(&cfg, &out)?;
            println!("wrote {} tiles in {} regions to {}", paths.len(), regions, out.display());
        }
        Command::Train {
            config,
            preset,
            data_root,
            out,
            resume,
            max_epochs,
        } => {
            let mut cfg = match &config {
                Some(path) => RunConfig::load(path)?,
                None => {
                    let mut cfg = RunConfig::preset(preset);
                    cfg.apply_env()?;
                    cfg
                }
            };
            if let Some(root) = data_root {
                cfg.data.root = root;
            }
            if let Some(dir) = out {
                cfg.output.dir = dir;
            }
            train(&cfg, &RunOptions { resume, max_epochs })?;
        }
        Command::Eval {
            ckpt,
            split,
            data_root,
            confusion,
        } => eval(&ckpt, split, data_root.as_deref(), confusion)?,
        Command::Gradcheck { scope, seed } => gradcheck(scope, seed)?,
        Command::Predict { ckpt, tile } => {
            let probs = match checkpoint::read_config(&ckpt)?.train.precision {
                Precision::Single => session::predict_tile::<f32>(&ckpt, &tile)?,
                Precision::Double => session::predict_tile::<f64>(&ckpt, &tile)?,
            };
            let class = usize::from(probs[1] > probs[0]);
            println!("{}", CLASS_NAMES[class]);
            for (name, p) in CLASS_NAMES.iter().zip(probs) {
                println!("  {name:<12} {p:.6}");
            }
        }
    }
    Ok(())
}

fn train(cfg: &RunConfig, opts: &RunOptions) -> anyhow::Result<()> {
    info!(
        "training {} model (seed {}, {} epochs) on {}",
        cfg.model.mode,
        cfg.seed,
        cfg.train.total_epochs,
        cfg.data.root.display()
    );
    let summary = match cfg.train.precision {
        Precision::Single => session::run_training::<f32>(cfg, opts)?,
        Precision::Double => session::run_training::<f64>(cfg, opts)?,
    };
    println!("parameters: {}", summary.num_params);
    println!("circuit evaluations: {}", summary.circuit_evaluations);
    println!("epochs completed: {}/{}", summary.epochs_done, cfg.train.total_epochs);
    println!("metrics: {}", summary.metrics_csv.display());
    if let Some(m) = summary.last_val {
        println!(
            "final val accuracy {:.4}, macro-F1 {:.4} (Flooded F1 {:.4}, Non-Flooded F1 {:.4})",
            m.accuracy,
            m.macro_f1(),
            m.flooded.f1,
            m.non_flooded.f1
        );
    }
    Ok(())
}

fn eval(ckpt: &Path, split: Split, data_root: Option<&Path>, confusion: Option<PathBuf>) -> anyhow::Result<()> {
    let (_, evaluation) = match checkpoint::read_config(ckpt)?.train.precision {
        Precision::Single => session::evaluate_checkpoint::<f32>(ckpt, split, data_root)?,
        Precision::Double => session::evaluate_checkpoint::<f64>(ckpt, split, data_root)?,
    };
    println!("split {} ({} tiles)", split.as_str(), evaluation.confusion.total());
    print!("{}", session::format_report(&evaluation));
    let path = confusion.unwrap_or_else(|| ckpt.with_file_name(format!("confusion_{}.csv", split.as_str())));
    fs::write(&path, session::confusion_csv(&evaluation)).with_context(|| format!("writing {}", path.display()))?;
    println!("confusion matrix: {}", path.display());
    Ok(())
}

fn gradcheck(scope: Scope, seed: u64) -> Result<(), Failure> {
    let checks = verify::run(scope, seed)?;
    let mut scopes: Vec<&str> = checks.iter().map(|c| c.scope).collect();
    scopes.dedup();
    for s in scopes {
        let group: Vec<_> = checks.iter().filter(|c| c.scope == s).collect();
        let worst = group
            .iter()
            .max_by(|a, b| (a.error / a.tolerance).total_cmp(&(b.error / b.tolerance)))
            .expect("non-empty group");
        let failed = group.iter().filter(|c| !c.passed()).count();
        println!(
            "{s:<9} {:>4} checks  worst {:<40} {:.3e} (tol {:.0e})  {}",
            group.len(),
            worst.name,
            worst.error,
            worst.tolerance,
            if failed == 0 { "ok".to_string() } else { format!("{failed} FAILED") }
        );
    }
    let offenders: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{}/{}: {:.3e} > {:.0e}", c.scope, c.name, c.error, c.tolerance))
        .collect();
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(offenders))
    }
}
