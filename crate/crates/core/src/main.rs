use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use geosde::cli::{cmd_convergence, cmd_simulate, cmd_validate};
use geosde::Execution;

#[derive(Parser)]
#[command(name = "geosde", version, about = "Geometry-preserving SDE integration on embedded manifolds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sampled geometric property checks for the configured manifold.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Per-path records and per-(scheme, delta) summaries over the step-size ladder.
    Convergence {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-iteration series for every (scheme, delta).
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let mut stdout = std::io::stdout();
    let status = match cli.command {
        Command::Validate { config } => cmd_validate(&config, &mut stdout),
        Command::Convergence { config, out, seed } => {
            cmd_convergence(&config, out.as_deref(), seed, Execution::Parallel, &mut stdout)
        }
        Command::Simulate { config, out, seed } => {
            cmd_simulate(&config, out.as_deref(), seed, Execution::Parallel, &mut stdout)
        }
    };
    ExitCode::from(status.code() as u8)
}
