//! Experiment front-end. Subcommands cover the two training recipes, the
//! rank-one construction checks, the finite-difference gradient check, the
//! simulator-vs-oracle comparison, and plot-data emission.

mod config;
mod plot;
mod reports;
mod runner;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use config::ExperimentConfig;
use patchlab::features::check_assumptions;
use patchlab::jsonfmt::to_string_17;
use patchlab::training::TrainMode;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "patchlab",
    about = "Synthetic patch-data laboratory for robust vs. non-robust feature learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds to run (repeatable); overrides the config list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output directory; overrides the config.
    #[arg(long = "out")]
    out: Option<PathBuf>,
    /// Epoch-count override.
    #[arg(long)]
    epochs: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(epochs) = self.epochs {
            cfg.train.epochs = epochs;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Standard training over the configured seeds.
    TrainStd(RunArgs),
    /// Adversarial training over the configured seeds.
    TrainAdv(RunArgs),
    /// Evaluate the hand-crafted rank-one networks.
    PropsCheck {
        #[command(flatten)]
        run: RunArgs,
        /// Scale of the rank-one filters.
        #[arg(long, default_value_t = 100.0)]
        gamma: f64,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run simulator and coefficient oracle side by side.
    OracleCompare {
        #[command(flatten)]
        run: RunArgs,
        /// Epochs for the lockstep comparison.
        #[arg(long, default_value_t = 100)]
        lockstep_epochs: usize,
    },
    /// Emit per-figure plot data (and SVG charts) from trace CSV files.
    Plot {
        /// Trace CSV files.
        traces: Vec<PathBuf>,
        /// Panel family the traces belong to.
        #[arg(long, value_parser = ["std", "adv"])]
        mode: String,
        #[arg(long = "out", default_value = "plots")]
        out: PathBuf,
        /// Skip SVG rendering.
        #[arg(long)]
        no_svg: bool,
    },
    /// Print the strength/density assumption report for a config.
    CheckAssumptions {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(val) = std::env::var("PATCHLAB_THREADS") {
        let threads: usize = val
            .parse()
            .with_context(|| format!("PATCHLAB_THREADS must be a positive integer, got {val}"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("installing thread pool")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(pass) => {
            if pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> anyhow::Result<bool> {
    configure_threads()?;
    let cli = Cli::parse();
    match cli.command {
        Command::TrainStd(args) => {
            let cfg = args.resolve()?;
            let summary = runner::run_experiment(&cfg, TrainMode::Standard, cli.quiet)?;
            if !cli.quiet {
                println!(
                    "std summary: std_acc mean {:.4}, rob_acc mean {:.4}",
                    summary.std_acc.mean, summary.rob_acc.mean
                );
            }
            Ok(true)
        }
        Command::TrainAdv(args) => {
            let cfg = args.resolve()?;
            let summary = runner::run_experiment(&cfg, TrainMode::Adversarial, cli.quiet)?;
            if !cli.quiet {
                println!(
                    "adv summary: std_acc mean {:.4}, rob_acc mean {:.4}",
                    summary.std_acc.mean, summary.rob_acc.mean
                );
            }
            Ok(true)
        }
        Command::PropsCheck { run, gamma } => {
            let cfg = run.resolve()?;
            let report = reports::props_check(&cfg, gamma, cfg.seeds[0])?;
            println!("{}", to_string_17(&report)?);
            for (name, ok) in &report.assertions {
                println!("  [{}] {name}", if *ok { "pass" } else { "FAIL" });
            }
            std::fs::create_dir_all(&cfg.output_dir)?;
            std::fs::write(
                cfg.output_dir.join("props_check.json"),
                to_string_17(&report)?,
            )?;
            Ok(report.pass)
        }
        Command::Gradcheck { trials, seed } => {
            let report = patchlab::gradcheck::run_gradcheck(trials, seed)?;
            println!("{}", to_string_17(&report)?);
            let pass = report.max_rel_weights <= 1e-6 && report.max_rel_input <= 1e-6;
            println!(
                "gradcheck: weights {:.3e}, input {:.3e} over {} trials -> {}",
                report.max_rel_weights,
                report.max_rel_input,
                report.trials,
                if pass { "pass" } else { "FAIL" }
            );
            Ok(pass)
        }
        Command::OracleCompare {
            run,
            lockstep_epochs,
        } => {
            let cfg = run.resolve()?;
            let out = cfg.output_dir.join("oracle_compare");
            let report = reports::oracle_compare(&cfg, lockstep_epochs, &out, cli.quiet)?;
            println!(
                "oracle-compare: {}",
                if report.pass { "pass" } else { "FAIL" }
            );
            Ok(report.pass)
        }
        Command::Plot {
            traces,
            mode,
            out,
            no_svg,
        } => {
            let written = plot::emit_plot_data(&traces, &mode, &out, !no_svg)?;
            if !cli.quiet {
                for path in &written {
                    println!("wrote {}", path.display());
                }
            }
            Ok(true)
        }
        Command::CheckAssumptions { config } => {
            let cfg = match config {
                Some(path) => ExperimentConfig::load(&path)?,
                None => ExperimentConfig::default(),
            };
            cfg.validate()?;
            let report = check_assumptions(&cfg.data)?;
            println!("{}", to_string_17(&report)?);
            Ok(report.strength_ok && report.density_ok)
        }
    }
}
