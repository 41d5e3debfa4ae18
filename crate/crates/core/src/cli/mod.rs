//! Config-driven experiment runner behind the `protomoe` binary.

mod config;
mod run;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{effective_config, parse_config, ExperimentConfig, ExperimentKind};
pub use run::{run, total_flops_spread, RunReport, RunStatus, EXIT_SETUP_ERROR};

use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "protomoe", version, about = "Sparse mixture-of-experts routing experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Output directory (overrides `out`; default `out`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
}

/// Reads `path`, applies flag overrides and validates the result.
pub fn load_config(path: &std::path::Path, seed: Option<u64>, steps: Option<usize>, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let mut config = parse_config(&text)?;
    if let Some(s) = seed {
        config.train.seed = s;
    }
    if let Some(s) = steps {
        config.train.steps = s;
    }
    if out.is_some() {
        config.out = out;
    }
    config.train.validate()?;
    Ok(config)
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_SETUP_ERROR } else { 0 };
        }
    };
    let Command::Run { config, out, seed, steps } = cli.command;
    let config = match load_config(&config, seed, steps, out) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_SETUP_ERROR;
        }
    };
    let out_dir = config.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    match run(&config, &out_dir) {
        Ok(report) => {
            println!("{} {:?}; results in {}", config.kind.key(), report.status, out_dir.display());
            report.status.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_SETUP_ERROR
        }
    }
}

#[cfg(test)]
mod tests;
