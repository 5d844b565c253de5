//! `iterflow` command-line driver.
//!
//! Subcommands `generate`, `train`, `infer`, `evaluate` and `sweep` wrap the
//! library pipeline. Every machine-readable output is a file under the
//! output directory; progress goes to standard error.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

/// Failure classes, mapped to process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration, arguments or incompatible inputs (exit code 1).
    #[error("{0}")]
    Validation(String),
    /// Numerical or I/O failure while running (exit code 2).
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<iterflow_core::Error> for CliError {
    fn from(e: iterflow_core::Error) -> Self {
        use iterflow_core::Error as E;
        match e {
            E::Io(_) | E::NonFinite(_) | E::Diverged { .. } | E::NonFiniteFiducial { .. } => {
                CliError::Runtime(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "iterflow", version, about = "Iterative amortized posterior refinement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `paths.out` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `threads` from the config.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the stage-0 training dataset.
    Generate(Common),
    /// Train all stages and write a pipeline bundle.
    Train(Common),
    /// Draw posterior samples for one observation.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Pipeline bundle directory.
        #[arg(long)]
        bundle: PathBuf,
        /// Observation file: numbers separated by commas or whitespace.
        #[arg(long, conflicts_with_all = ["dataset", "record"])]
        y: Option<PathBuf>,
        /// Dataset file to take the observation from.
        #[arg(long, requires = "record")]
        dataset: Option<PathBuf>,
        /// Record index within `--dataset`.
        #[arg(long, requires = "dataset")]
        record: Option<usize>,
        /// Posterior draws; `eval.n_samples` when omitted.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Per-stage metrics of a bundle on a fresh test set.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Train and evaluate one pipeline per `eval.sweep_sizes` entry.
    Sweep(Common),
}

impl Common {
    /// Loads the config file and applies command-line overrides.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.paths.out = o.clone();
        }
        if let Some(t) = self.threads {
            cfg.threads = Some(t);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn init_threads(cfg: &RunConfig) {
    if let Some(n) = cfg.threads {
        // a pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Executes one parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(c) => {
            let cfg = c.resolve()?;
            init_threads(&cfg);
            commands::generate(&cfg).map(|_| ())
        }
        Command::Train(c) => {
            let cfg = c.resolve()?;
            init_threads(&cfg);
            commands::train(&cfg).map(|_| ())
        }
        Command::Infer {
            common,
            bundle,
            y,
            dataset,
            record,
            samples,
        } => {
            let cfg = common.resolve()?;
            init_threads(&cfg);
            let source = match (y, dataset, record) {
                (Some(p), None, None) => commands::ObservationSource::File(p.clone()),
                (None, Some(d), Some(r)) => commands::ObservationSource::Record(d.clone(), *r),
                _ => {
                    return Err(CliError::Validation(
                        "infer needs either --y FILE or --dataset FILE --record N".into(),
                    ))
                }
            };
            commands::infer(&cfg, bundle, &source, samples.unwrap_or(cfg.eval.n_samples)).map(|_| ())
        }
        Command::Evaluate { common, bundle } => {
            let cfg = common.resolve()?;
            init_threads(&cfg);
            commands::evaluate(&cfg, bundle).map(|_| ())
        }
        Command::Sweep(c) => {
            let cfg = c.resolve()?;
            init_threads(&cfg);
            commands::sweep(&cfg).map(|_| ())
        }
    }
}
