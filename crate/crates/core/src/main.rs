use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedsim::runner::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Deterministic federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for client training (FEDSIM_JOBS overrides).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Print the shard split.
    Partition {
        #[command(flatten)]
        config: ConfigArg,
        /// Print per-shard label histograms.
        #[arg(long)]
        inspect: bool,
    },
    /// Run one experiment per value of a config key.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        /// Dotted key, e.g. `client.lambda0`.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Check a config against the schema without running it.
    Validate {
        #[command(flatten)]
        config: ConfigArg,
    },
}

fn report(r: &runner::RunReport, dir: &std::path::Path) {
    match &r.summary.final_record {
        Some(rec) => println!(
            "{}: round {} global_acc {:.4} local_acc {:.4} sparsity {:.2}% bytes up {} down {}",
            dir.display(),
            rec.round,
            rec.global_acc,
            rec.local_acc_mean,
            rec.sparsity_pct,
            rec.bytes_up_cum,
            rec.bytes_down_cum
        ),
        None => println!("{}: no records", dir.display()),
    }
}

fn execute(cli: Cli) -> fedsim::Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            jobs,
        } => {
            let mut cfg = ExperimentConfig::load(&config.config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let r = runner::run_experiment(&cfg, runner::resolve_jobs(jobs))?;
            report(&r, &cfg.output_dir);
        }
        Command::Partition { config, inspect } => {
            let cfg = ExperimentConfig::load(&config.config)?;
            let text = runner::inspect_partition(&cfg)?;
            if inspect {
                print!("{text}");
            } else {
                print!("{}", text.lines().next().map(|l| format!("{l}\n")).unwrap_or_default());
            }
        }
        Command::Sweep {
            config,
            param,
            values,
            out,
            jobs,
        } => {
            let base = ExperimentConfig::load(&config.config)?;
            let root = out.unwrap_or_else(|| base.output_dir.clone());
            let runs = values
                .iter()
                .map(|v| {
                    let mut cfg = base.with_param(&param, v)?;
                    cfg.output_dir = root.join(format!("{param}={v}"));
                    cfg.validate()?;
                    Ok(cfg)
                })
                .collect::<fedsim::Result<Vec<_>>>()?;
            for cfg in &runs {
                let r = runner::run_experiment(cfg, runner::resolve_jobs(jobs))?;
                report(&r, &cfg.output_dir);
            }
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config.config)?;
            cfg.validate()?;
            println!("{}: ok", config.config.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
