//! `mmdl`: simulate training data, learn dictionaries, estimate channels,
//! evaluate bounds and run Monte-Carlo sweeps.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or override syntax; exit code 1.
    Usage(String),
    /// Unreadable or invalid inputs and configs; exit code 2.
    Data(String),
    /// A numerical routine failed; exit code 3.
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<mmdl::Error> for CliError {
    fn from(e: mmdl::Error) -> Self {
        match e {
            mmdl::Error::Numerical(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "mmdl", version, about = "Dictionary learning and compressive channel estimation for impaired mmWave arrays")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// JSON config merged over the command's defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; replaces the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Config override `dot.path=value` (repeatable); value is JSON or a bare string.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Codl,
    Sedl,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate channels and training measurements for several locations.
    Generate,
    /// Learn a dictionary from a generated dataset.
    Learn {
        /// Dataset directory written by `generate`.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        /// Continue from the state saved in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Estimate the channels of a dataset with a sparsifying dictionary.
    Estimate {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// `iarm` for the ideal array response grid, or a dictionary directory.
        #[arg(long, value_name = "iarm|DIR")]
        dict: String,
    },
    /// Cramér-Rao bound of one location's channel.
    Crlb {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Location index inside the dataset.
        #[arg(long, default_value_t = 0)]
        location: usize,
    },
    /// Monte-Carlo comparison of dictionaries and solvers.
    Experiment,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mmdl: {e}");
            ExitCode::from(e.code())
        }
    }
}
