//! Configuration and command dispatch for the `part` binary.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::RunError;
pub use config::{parse_config, ConfigError, Settings};

#[derive(Debug, Parser)]
#[command(name = "part", about = "Part-guided relational transformer at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Directory for every artifact of the run.
    #[arg(long, default_value = "out", global = true)]
    pub out: PathBuf,
    /// Master seed; overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train and write model.ckpt and metrics.csv.
    Train,
    /// Print test accuracy of a checkpoint as `top1=<value>`.
    Eval,
    /// Write parts.csv and per-part mask PGMs for one test sample.
    Discover,
    /// Write cam.pgm and cam.csv for one test sample.
    Cam,
    /// Write the `alpha,gap` conv-equivalence sweep to equiv.csv.
    Equiv,
}

/// Resolved invocation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    pub out: PathBuf,
    pub settings: Settings,
}

impl RunConfig {
    pub fn from_cli(cli: &Cli) -> Result<Self, RunFailure> {
        let text = match &cli.config {
            Some(path) => std::fs::read_to_string(path)
                .map_err(|e| RunFailure::Run(RunError::Io { context: format!("reading {}", path.display()), source: e }))?,
            None => String::new(),
        };
        let settings = parse_config(&text, &cli.overrides, cli.seed).map_err(RunFailure::Config)?;
        Ok(Self { command: cli.command, out: cli.out.clone(), settings })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunFailure {
    #[error(transparent)]
    Config(ConfigError),
    #[error(transparent)]
    Run(RunError),
}

impl RunFailure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Run(e) => e.exit_code(),
        }
    }
}

/// Executes one resolved command.
pub fn run(cfg: &RunConfig) -> Result<(), RunError> {
    std::fs::create_dir_all(&cfg.out)
        .map_err(|source| RunError::Io { context: format!("creating {}", cfg.out.display()), source })?;
    let (s, out) = (&cfg.settings, cfg.out.as_path());
    log::debug!("{:?}", s.seeds);
    match cfg.command {
        Command::Train => commands::cmd_train(s, out).map(drop),
        Command::Eval => commands::cmd_eval(s, out).map(drop),
        Command::Discover => commands::cmd_discover(s, out).map(drop),
        Command::Cam => commands::cmd_cam(s, out).map(drop),
        Command::Equiv => commands::cmd_equiv(s, out).map(drop),
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("PART_THREADS") else { return Ok(()) };
    let n: usize = v.parse().map_err(|_| format!("PART_THREADS must be a positive integer, got {v:?}"))?;
    if n == 0 {
        return Err("PART_THREADS must be at least 1".into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return 2;
    }
    let result = RunConfig::from_cli(&cli).and_then(|cfg| run(&cfg).map_err(RunFailure::Run));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
