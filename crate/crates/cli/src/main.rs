//! `fedpurify` command-line driver.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fedpurify::config::ExperimentConfig;
use fedpurify::federation::{run_training, RunOptions};
use fedpurify::harness::{attack_sweep, emit_plots, evaluate_run, REFERENCE_FOOTER};

#[derive(Parser)]
#[command(name = "fedpurify", version, about = "Federated mixture-of-experts with detect-and-purify defense")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory; overrides `output_dir` from the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Master seed; overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.out_dir {
            cfg.output_dir = dir.clone();
        }
        let dir = cfg.output_dir.clone();
        Ok((cfg, dir))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the purifier, detector and federated phases.
    Train {
        #[command(flatten)]
        common: Common,
        /// Skip phases already completed in the run directory.
        #[arg(long)]
        resume: bool,
        /// Train clients one at a time (bit-reproducible).
        #[arg(long)]
        sequential: bool,
    },
    /// Evaluate a trained run: {undefended, defended} x {clean, adversarial}.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy across perturbation budgets.
    AttackSweep {
        #[command(flatten)]
        common: Common,
        /// Budgets to evaluate, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0.005,0.01,0.015,0.03")]
        eps: Vec<f64>,
    },
    /// Render convergence and score plots from a run directory.
    Plot {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Train {
            common,
            resume,
            sequential,
        } => {
            let (cfg, dir) = common.load()?;
            let art = run_training(&cfg, &dir, &RunOptions { resume, sequential })
                .with_context(|| format!("training into {}", dir.display()))?;
            for p in &art.skipped {
                println!("skipped {p} (already complete)");
            }
            for p in &art.executed {
                println!("completed {p}");
            }
            println!("threshold tau = {:.6e}", art.tau);
            for r in &art.rounds {
                println!(
                    "round {:>3}: clean {:.4}  adversarial {:.4}  loss {:.4}",
                    r.round,
                    r.clean_accuracy.unwrap_or(f64::NAN),
                    r.adversarial_accuracy.unwrap_or(f64::NAN),
                    r.mean_local_loss()
                );
            }
        }
        Command::Evaluate { common } => {
            let (cfg, dir) = common.load()?;
            let eval = evaluate_run(&cfg, &dir).with_context(|| format!("evaluating {}", dir.display()))?;
            print!("{}", eval.table.to_markdown());
            println!("detector AUROC {:.4}", eval.detector_auroc);
            println!("\n{REFERENCE_FOOTER}");
        }
        Command::AttackSweep { common, eps } => {
            let (cfg, dir) = common.load()?;
            let table = attack_sweep(&cfg, &dir, &eps)?;
            print!("{}", table.to_markdown());
        }
        Command::Plot { out_dir } => {
            for p in emit_plots(&out_dir)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}
