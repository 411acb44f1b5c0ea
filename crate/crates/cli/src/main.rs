use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pfdiff_cli::config::{self, LoadedConfig, VerifySection, OUTPUT_ROOT_ENV};
use pfdiff_cli::{commands, verify, CliResult};
use pfdiff_core::experiment::ExperimentConfig;

/// Particle-filter correction of diffusion samplers on analytic toy worlds.
#[derive(Parser)]
#[command(name = "pfdiff", version)]
struct Cli {
    /// Override the seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for outputs and artifact paths.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a method over sampled conditions and write the report.
    Run { config: PathBuf },
    /// Estimate the occurrence table from plain runs.
    Kappa { config: PathBuf },
    /// Train the conditional and unconditional discriminators.
    TrainDisc { config: PathBuf },
    /// Run the invariant suite.
    Verify { config: Option<PathBuf> },
    /// Recompute metrics from a run directory's stored samples.
    Metrics { run_dir: PathBuf },
}

fn load(cli: &Cli, path: &Path) -> CliResult<LoadedConfig> {
    config::load(path, cli.seed, &config::output_root(cli.output_root.as_deref()))
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let mut stdout = std::io::stdout();
    match &cli.command {
        Command::Run { config } => {
            let cfg = load(cli, config)?;
            let r = commands::cmd_run(&cfg)?;
            for s in r.all() {
                println!(
                    "{}: occurrence {:.4}, Fréchet {:.4}, NFE/sample {:.0}",
                    s.method.name(),
                    s.occurrence.mean,
                    s.frechet.value,
                    s.nfe_per_sample
                );
            }
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Kappa { config } => {
            let cfg = load(cli, config)?;
            let a = commands::cmd_kappa(&cfg)?;
            println!(
                "kappa table over {} runs, {} events, {} defaulted cells; wrote {}",
                a.table.h_runs,
                a.table.n_events(),
                a.table.defaulted_cells().len(),
                cfg.output_dir.join(commands::KAPPA_FILE).display()
            );
        }
        Command::TrainDisc { config } => {
            let cfg = load(cli, config)?;
            let a = commands::cmd_train_disc(&cfg)?;
            println!(
                "conditional held-out loss {:.4} acc {:.3}; unconditional held-out loss {:.4} acc {:.3}; wrote {}",
                a.conditional_heldout.loss,
                a.conditional_heldout.accuracy,
                a.unconditional_heldout.loss,
                a.unconditional_heldout.accuracy,
                cfg.output_dir.join(commands::DISCRIMINATOR_FILE).display()
            );
        }
        Command::Verify { config } => {
            let (exp, opts) = match config {
                Some(p) => {
                    let cfg = load(cli, p)?;
                    (cfg.experiment, cfg.verify)
                }
                None => {
                    let exp = ExperimentConfig { seed: cli.seed.unwrap_or(0), ..Default::default() };
                    (exp, VerifySection::default())
                }
            };
            let checks = verify::run_suite(&exp, &opts, &mut stdout)?;
            verify::summarize(&checks)?;
        }
        Command::Metrics { run_dir } => {
            commands::cmd_metrics(run_dir, &mut stdout)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
