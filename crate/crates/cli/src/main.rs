mod args;
mod commands;
mod error;
mod io;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command, Exec};
use error::CliError;

fn set_threads(exec: &Exec) -> Result<(), CliError> {
    if let Some(n) = exec.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot set up {n} threads: {e}")))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { args, exec } => {
            set_threads(&exec)?;
            commands::run(&args, &exec.out)
        }
        Command::Pmmh { args, exec } => {
            set_threads(&exec)?;
            commands::pmmh(&args, &exec.out)
        }
        Command::Simulate(args) => commands::simulate(&args),
        Command::Replay { manifest, exec } => {
            set_threads(&exec)?;
            commands::replay(&manifest, &exec.out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
