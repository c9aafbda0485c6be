use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fpdiff_cli::commands::{self, Outcome};

#[derive(Parser)]
#[command(
    name = "fpdiff",
    version,
    about = "Score-based diffusion with learnable Fokker-Planck forward processes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `section.key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `run.seed` (which must still be present in the file).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Verify that a forward model keeps N(0, I/m) stationary.
    CheckStationary(Common),
    /// Write forward, reverse or probability-flow trajectories.
    Simulate(Common),
    /// Train a score network, optionally with the forward process.
    Train(Common),
    /// Compare VP, FP-Noise and regularized FP-Noise on plane data.
    Toy3d(Common),
    /// Compute metrics for a checkpoint or an exact score.
    Eval(Common),
}

type Runner = fn(&Path, &Path, Option<u64>) -> anyhow::Result<Outcome>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (run, c): (Runner, Common) = match cli.command {
        Command::CheckStationary(c) => (commands::check::run, c),
        Command::Simulate(c) => (commands::simulate::run, c),
        Command::Train(c) => (commands::train::run, c),
        Command::Toy3d(c) => (commands::toy3d::run, c),
        Command::Eval(c) => (commands::eval::run, c),
    };
    match run(&c.config, &c.out, c.seed) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail(lines)) => {
            for l in lines {
                eprintln!("FAIL {l}");
            }
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
