use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use csi_core::harness::{
    cmd_evaluate, cmd_generalize, cmd_generate, cmd_gradcheck, cmd_sweep_cr, cmd_sweep_samples, cmd_train,
    ExperimentConfig,
};

/// Compressive CSI feedback experiments: data generation, training and studies.
#[derive(Parser, Debug)]
#[command(name = "csi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (`key = value` lines); defaults to the desk profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate scenario files and split manifests.
    Generate(Common),
    /// Train the configured variant and report test metrics.
    Train(Common),
    /// Evaluate a checkpoint on the test splits.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compression-ratio sweep.
    SweepCr(Common),
    /// Training-set size sweep.
    SweepSamples(Common),
    /// Transfer to held-out scenarios against per-scenario upper bounds.
    Generalize(Common),
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        /// Also write the report as CSV to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_rows(rows: &[csi_core::harness::ResultRow]) {
    for r in rows {
        println!(
            "{:<40} {:<10} {:<12} NMSE {:>9.3} dB  GCS {:.4}",
            r.run_id, r.variant, r.split, r.metric.nmse_db, r.metric.gcs
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = load(&c)?;
            let report = cmd_generate(&cfg)?;
            for (range, [tr, va, te]) in &report.split_sizes {
                println!("scenarios {range}: train {tr}, val {va}, test {te}");
            }
            println!(
                "wrote {} scenario files under {}",
                report.files.len(),
                cfg.out_dir.display()
            );
        }
        Command::Train(c) => {
            let cfg = load(&c)?;
            let r = cmd_train(&cfg)?;
            for e in &r.history {
                println!("epoch {:>3}  val NMSE {:>9.3} dB", e.epoch, 10.0 * e.val_nmse.log10());
            }
            print_rows(&r.rows);
            println!("best epoch {}, checkpoint {}", r.epoch_best, r.checkpoint.display());
        }
        Command::Evaluate { common, checkpoint } => {
            let cfg = load(&common)?;
            print_rows(&cmd_evaluate(&cfg, &checkpoint)?);
        }
        Command::SweepCr(c) => print_rows(&cmd_sweep_cr(&load(&c)?)?),
        Command::SweepSamples(c) => print_rows(&cmd_sweep_samples(&load(&c)?)?),
        Command::Generalize(c) => {
            let (summary, rows) = cmd_generalize(&load(&c)?)?;
            print_rows(&rows);
            for g in summary {
                println!(
                    "{:<10} transfer {:>8.3} dB  upper bound {:>8.3} dB  gap {:>7.3} dB",
                    g.variant, g.transfer_nmse_db, g.upper_bound_nmse_db, g.gap_db
                );
            }
        }
        Command::Gradcheck { out } => {
            let report = cmd_gradcheck();
            let text = match &report {
                Ok(r) => r.to_text(),
                Err(e) => e.to_string(),
            };
            print!("{text}");
            if let Some(path) = out {
                std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
            }
            report?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
