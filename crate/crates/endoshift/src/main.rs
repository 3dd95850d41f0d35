use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use endoshift::cli::{self, CliError, MethodSelector, RunOverrides};

/// Iterative conformal prediction campaigns for uncertainty-aware
/// multi-agent MPC.
#[derive(Parser)]
#[command(name = "endoshift", version, about)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured campaign(s) and write CSV artifacts.
    Run {
        /// Flat key/value config file.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's method selector (ncp|bcp|icp|iscp|all).
        #[arg(long)]
        method: Option<String>,
        /// Cap the worker pool; results are identical for any thread count.
        #[arg(long)]
        threads: Option<usize>,
        /// Validate and print the resolved plan without simulating.
        #[arg(long)]
        dry_run: bool,
    },
    /// Re-evaluate a finished run on a fresh seeded test set.
    Evaluate {
        /// Directory written by `run` (contains manifest.json).
        #[arg(long)]
        run: PathBuf,
        /// Seed of the fresh test set.
        #[arg(long)]
        seed: u64,
    },
    /// Run the campaign once per parameter value with shared seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Parameter to sweep (gamma).
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. 0.2,0.8,0.9.
        #[arg(long)]
        values: String,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn execute(args: Args) -> Result<(), CliError> {
    match args.command {
        Command::Run {
            config,
            method,
            threads,
            dry_run,
        } => {
            let overrides = RunOverrides {
                method: method.as_deref().map(MethodSelector::parse).transpose()?,
                threads,
                dry_run,
                out_dir: None,
            };
            let summary = cli::cmd_run(&config, &overrides)?;
            if !summary.dry_run {
                println!("run complete: {}", summary.out_dir.display());
                for run in &summary.methods {
                    let m = &run.test_metrics;
                    println!(
                        "  {:<4} collision {:6.2}%  success {:6.2}%  misdetection {}  nav {}",
                        run.method.as_str(),
                        m.collision_rate,
                        m.success_rate,
                        m.misdetection_rate
                            .map(|v| format!("{v:6.2}%"))
                            .unwrap_or_else(|| "   -  ".into()),
                        m.avg_nav_time_s
                            .map(|v| format!("{v:.2}s"))
                            .unwrap_or_else(|| "-".into()),
                    );
                }
            }
            Ok(())
        }
        Command::Evaluate { run, seed } => {
            let summary = cli::cmd_evaluate(&run, seed)?;
            println!("evaluated {} method(s) on seed {seed}", summary.reports.len());
            for (method, m) in &summary.reports {
                println!(
                    "  {:<4} collision {:6.2}%  success {:6.2}%",
                    method.as_str(),
                    m.collision_rate,
                    m.success_rate
                );
            }
            Ok(())
        }
        Command::Sweep {
            config,
            param,
            values,
            method,
            threads,
        } => {
            let parsed: Result<Vec<f64>, _> =
                values.split(',').map(|v| v.trim().parse::<f64>()).collect();
            let parsed = parsed
                .map_err(|e| CliError::Config(format!("bad --values {values:?}: {e}")))?;
            let overrides = RunOverrides {
                method: method.as_deref().map(MethodSelector::parse).transpose()?,
                threads,
                dry_run: false,
                out_dir: None,
            };
            let summary = cli::cmd_sweep(&config, &param, &parsed, &overrides)?;
            println!("sweep complete: {}", summary.out_dir.display());
            for (value, dir) in &summary.children {
                println!("  {param}={value} -> {}", dir.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
