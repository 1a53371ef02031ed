use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use cmi_dps_cli::{diagnose_problem, run_experiment, ExperimentConfig, Problem};

#[derive(Parser)]
#[command(name = "cmi-dps", about = "CMI-guided diffusion posterior sampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured sampler on a batch of seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        base_seed: Option<u64>,
    },
    /// Check operator adjoints, derivatives and CMI invariants.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the version.
    Version,
}

fn load(path: &Path) -> anyhow::Result<(ExperimentConfig, Problem)> {
    let (cfg, source) = ExperimentConfig::load(path)?;
    let problem = Problem::build(&cfg, &source).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    Ok((cfg, problem))
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, out, batch, base_seed } => {
            let (mut cfg, problem) = load(&config)?;
            if let Some(b) = batch {
                anyhow::ensure!(b >= 1, "--batch must be at least 1");
                cfg.batch = b;
            }
            if let Some(s) = base_seed {
                cfg.base_seed = s;
            }
            let dir = out.unwrap_or_else(|| cfg.output.clone());
            let output = run_experiment(&cfg, &problem)?;
            output
                .write(&dir, problem.grid, cfg.dump_grids)
                .with_context(|| format!("writing results to {}", dir.display()))?;
            println!("{:<10} {:>5} {:>5} {:>14} {:>14}", "mode", "runs", "fail", "mse", "stderr");
            for (mode, s) in &output.summary.modes {
                let (mean, se) = s.mse.map_or((f64::NAN, f64::NAN), |m| (m.mean, m.stderr));
                println!("{mode:<10} {:>5} {:>5} {mean:>14.6e} {se:>14.6e}", s.runs, s.failures);
            }
            for p in &output.summary.paired {
                let diff = p.mse_diff.map_or(f64::NAN, |d| d.mean);
                println!(
                    "{} vs {}: mean mse diff {diff:.4e}, effect size {:.3}, wins {}/{}",
                    p.mode, p.base, p.effect_size, p.wins, p.pairs
                );
            }
            println!("results written to {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Diagnose { config, seed } => {
            let (cfg, problem) = load(&config)?;
            let report = diagnose_problem(&problem, &cfg.diagnose, seed)?;
            print!("{report}");
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Version => {
            println!("cmi-dps {}", env!("CARGO_PKG_VERSION"));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
