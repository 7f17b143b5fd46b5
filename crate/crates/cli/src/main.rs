//! `logan`: train, sweep and inspect BiGAN runs on toy mixtures.
//!
//! Exit status: 0 on success, 2 for a config/schema error, 3 if any run
//! aborted, 1 for anything else (I/O, bad snapshot).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use logan_core::experiment::{self, EscapeConfig, ExperimentConfig, ExperimentError};
use logan_core::trainer::TrainError;

#[derive(Parser)]
#[command(name = "logan", version, about = "Logit-loss BiGAN experiments on 2-D toy mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment file (JSON).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its run directory.
    Train(Common),
    /// Run the loss x penalty x seed matrix of the config's `sweep` section.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Runs executed concurrently.
        #[arg(long, value_name = "K", default_value_t = 1)]
        jobs: usize,
    },
    /// Tabulate MSE vs pair-wise escape outcomes across valley depths.
    Escape(Common),
    /// Re-score a model snapshot on fresh samples.
    Eval {
        snapshot: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Export the `D(x, E(x))` grid of a model snapshot.
    Contour {
        snapshot: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common, required: bool) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if required => return Err(ExperimentError::Usage("--config is required".into())),
        None => ExperimentConfig::from_json(r#"{"train": {"objective": {"loss_kind": "lol1", "penalty_kind": "pairwise_gp"}}}"#)?,
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        if let Some(s) = cfg.sweep.as_mut() {
            s.seeds = vec![seed];
        }
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> Result<PathBuf, ExperimentError> {
    common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| ExperimentError::Usage("no output directory: pass --out or set out_dir".into()))
}

fn write_report(path: &Path, report: &experiment::EvalReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)? + "\n";
    std::fs::write(path, text).with_context(|| path.display().to_string())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load_config(&common, true)?;
            let dir = out_dir(&common, &cfg)?;
            let out = experiment::cmd_train(&cfg, &dir)?;
            let c = &out.coverage;
            println!(
                "{}: {} of {} modes, hq_fraction {}",
                dir.display(),
                c.modes_captured,
                c.per_mode_counts.len(),
                c.hq_fraction
            );
        }
        Command::Sweep { common, jobs } => {
            let cfg = load_config(&common, true)?;
            let dir = out_dir(&common, &cfg)?;
            let result = experiment::cmd_sweep(&cfg, &dir, jobs);
            if let Ok(text) = std::fs::read_to_string(dir.join("summary.csv")) {
                print!("{text}");
            }
            result?;
        }
        Command::Escape(common) => {
            let cfg = load_config(&common, false)?;
            let escape = cfg.escape.clone().unwrap_or_else(EscapeConfig::default);
            let dir = common.out.clone().or_else(|| cfg.out_dir.clone());
            let rows = experiment::cmd_escape(&escape, dir.as_deref())?;
            print!("{}", logan_core::evaluation::escape_csv(&rows));
        }
        Command::Eval { snapshot, common } => {
            let cfg = load_config(&common, false)?;
            let report = experiment::cmd_eval(&cfg, &snapshot, cfg.train.seed)?;
            match common.out.clone().or_else(|| cfg.out_dir.clone()) {
                Some(dir) => {
                    std::fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
                    write_report(&dir.join("eval.json"), &report)?;
                }
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        Command::Contour { snapshot, common } => {
            let cfg = load_config(&common, false)?;
            let dir = out_dir(&common, &cfg)?;
            let grid = experiment::cmd_contour(&cfg, &snapshot, &dir)?;
            println!("{}: roughness {}", dir.join("contour.csv").display(), grid.roughness());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<ExperimentError>() {
        Some(ExperimentError::Schema { .. }) => 2,
        Some(ExperimentError::RunsAborted { .. }) | Some(ExperimentError::Train(TrainError::Aborted(_))) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
