use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedsim::cli::{self, CliError};

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Simulated federated training across heterogeneous platforms")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every entry of an experiment file.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replaces the run and data seeds of every entry.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a comparison table from existing summaries.
    Compare {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        names: Vec<String>,
    },
    /// Run every entry once per value of a single parameter.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check an experiment file without running it.
    Validate { config: PathBuf },
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { config, out, seed } => {
            for a in cli::cmd_run(&config, &out, seed)? {
                println!("{}: {}", a.summary.name, a.metrics_path.display());
            }
        }
        Command::Compare { out, names } => print!("{}", cli::cmd_compare(&out, &names)?),
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => print!("{}", cli::cmd_sweep(&config, &param, &values, &out)?.table),
        Command::Validate { config } => {
            for name in cli::cmd_validate(&config)? {
                println!("ok {name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
