use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lvfl::cli;

/// Lightweight vertical federated learning simulator.
///
/// Log verbosity follows the `LVFL_LOG` environment variable
/// (`error`, `warn`, `info`, `debug`, `trace`).
#[derive(Parser)]
#[command(name = "lvfl", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config.
    Run {
        config: PathBuf,
        /// Overrides the config's output_dir.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run several configs sharing seed and dataset and compare them.
    Compare {
        #[arg(required = true, num_args = 2..)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Check the protocol against joint-model SGD (needs e = 1, zero ratios).
    Oracle { config: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("LVFL_LOG", "warn")).init();
    let args = Args::parse();
    let code = match args.command {
        Command::Run { config, out_dir } => cli::cmd_run(&config, out_dir.as_deref()).map(|_| cli::EXIT_OK),
        Command::Compare { configs, out_dir } => cli::cmd_compare(&configs, out_dir.as_deref()).map(|_| cli::EXIT_OK),
        Command::Oracle { config } => cli::cmd_oracle(&config).map(|r| {
            if r.passed() {
                cli::EXIT_OK
            } else {
                cli::EXIT_ORACLE_FAIL
            }
        }),
    };
    match code {
        Ok(c) => ExitCode::from(c as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
