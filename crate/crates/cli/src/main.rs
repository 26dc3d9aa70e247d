use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stcausal_core::model::Checkpoint;
use stcausal_core::pipeline::{self, RunConfig, Split};
use stcausal_core::{par, Error, Exec, Result};

#[derive(Parser)]
#[command(name = "stcausal", version, about = "Causal link discovery among events in disaster tweets")]
struct Cli {
    /// Worker threads for the parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run config. Missing sections take their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,

    /// Override a config field, e.g. `--set model.heads=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,

    /// Run config; defaults to the one stored in the checkpoint.
    #[arg(short, long)]
    config: Option<PathBuf>,

    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a JSON Lines dataset.
    Ingest { dataset: PathBuf },
    /// Write a synthetic dataset and its embedding file.
    Synth(ConfigArgs),
    /// Build the window graphs and dump them as JSON Lines.
    BuildGraphs {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, then write config, checkpoint, curves and test metrics.
    Train(ConfigArgs),
    /// Score a checkpoint on one split.
    Eval {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit predicted causal links as JSON Lines.
    Predict {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Minimum causal probability.
        #[arg(long, default_value_t = 0.5)]
        delta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full model and the three knockout variants.
    Ablation {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(args: &ConfigArgs) -> Result<RunConfig> {
    RunConfig::load(args.config.as_deref(), &args.overrides)
}

fn load_checkpoint(args: &CheckpointArgs) -> Result<(Checkpoint, RunConfig)> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let cfg = match &args.config {
        Some(p) => RunConfig::load(Some(p), &args.overrides)?,
        None => RunConfig::from_toml(&pipeline::checkpoint_config(&ckpt)?.to_toml(), &args.overrides)?,
    };
    Ok((ckpt, cfg))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let exec = Exec::Parallel;
    match cli.command {
        Command::Ingest { dataset } => {
            let report = pipeline::cmd_ingest(&dataset, exec)?;
            print!("{report}");
            return Ok(if report.is_clean() { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
        Command::Synth(args) => {
            let s = pipeline::cmd_synth(&load(&args)?)?;
            println!(
                "wrote {} tweets ({} events, {} causal pairs) to {}",
                s.records,
                s.events,
                s.positive_pairs,
                s.dataset.display()
            );
            println!("embeddings: {}", s.embeddings.display());
        }
        Command::BuildGraphs { cfg, out } => {
            let stats = pipeline::cmd_build_graphs(&load(&cfg)?, &out, exec)?;
            print_json(&stats)?;
        }
        Command::Train(args) => {
            let a = pipeline::cmd_train(&load(&args)?, exec)?;
            println!("run directory: {}", a.dir.display());
            println!("epochs: {} (best {})", a.epochs, a.best_epoch);
            print_json(&a.report)?;
        }
        Command::Eval { ckpt, split, out } => {
            let (c, cfg) = load_checkpoint(&ckpt)?;
            let report = pipeline::cmd_eval(&c, &cfg, split, exec)?;
            if let Some(p) = out {
                report.write_json(p)?;
            }
            print_json(&report)?;
        }
        Command::Predict { ckpt, delta, out } => {
            let (c, cfg) = load_checkpoint(&ckpt)?;
            let preds = pipeline::cmd_predict(&c, &cfg, delta, exec)?;
            pipeline::write_predictions(&out, &preds)?;
            println!("{} links with score >= {delta} written to {}", preds.len(), out.display());
        }
        Command::Ablation { cfg, out } => {
            let rows = pipeline::cmd_ablation(&load(&cfg)?, &out, exec)?;
            print!("{}", pipeline::ablation_csv(&rows));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(e: &Error) -> ExitCode {
    if e.is_validation() {
        ExitCode::from(1)
    } else {
        ExitCode::from(2)
    }
}

fn set_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    par::init_threads(n);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.threads {
        Some(n) => set_threads(n).and_then(|_| run(cli)),
        None => run(cli),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    })
}
