//! Pipeline stages behind the `failcast` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;

pub use config::PipelineConfig;

/// Exit status of a failed command.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    /// A self-check (gradient suite) did not pass.
    #[error("check failed: {0}")]
    Check(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] failcast_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 failed check, 2 config or spec error, 3 I/O error.
    pub fn exit_code(&self) -> u8 {
        use failcast_core::Error as E;
        match self {
            CliError::Check(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                E::Io { .. } | E::Format { .. } | E::Json(_) | E::Csv(_) => 3,
                E::Invariant(_) => 1,
                E::Dimension(_) | E::Parameter(_) | E::Spec(_) | E::Data(_) | E::Comparison(_) => 2,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "failcast", version, about = "Saliency-based failure prediction pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Pipeline config (JSON). Built-in defaults when absent.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override one config value, e.g. `--set failure.epochs=5`.
    #[arg(long = "set", global = true, value_name = "K=V")]
    pub overrides: Vec<String>,

    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Global seed (overrides `seed`).
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,

    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the train, validation and test datasets.
    GenData,
    /// Train the main model and its weak teacher.
    TrainPilot,
    /// Build failure-predictor training sets.
    GenSaliency,
    /// Transfer conv layers and train the failure predictors.
    TrainFailcast,
    /// Evaluate the failure predictors on the test set.
    Eval {
        /// Alarm threshold on |predicted error|, degrees.
        #[arg(long, value_name = "DEG")]
        alarm_threshold: Option<f64>,
    },
    /// Check every backward pass against finite differences.
    Gradcheck {
        /// Random cases per layer.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, hide = true)]
        inject_conv_sign_bug: bool,
    },
    /// gen-data, train-pilot, gen-saliency, train-failcast and eval in order.
    Run,
    /// Print the effective config as JSON.
    ShowConfig,
}

impl CommonArgs {
    pub fn resolve_config(&self) -> Result<PipelineConfig, CliError> {
        let mut cfg = PipelineConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

/// Runs one parsed command line.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let console = commands::Console {
        quiet: cli.common.quiet,
    };
    if let Command::Gradcheck {
        seeds,
        inject_conv_sign_bug,
    } = cli.command
    {
        return commands::gradcheck(seeds, inject_conv_sign_bug, &console).map(drop);
    }
    let mut cfg = cli.common.resolve_config()?;
    if let Command::Eval {
        alarm_threshold: Some(t),
    } = cli.command
    {
        cfg.eval.alarm_threshold_degrees = Some(t);
    }
    match &cli.command {
        Command::GenData => commands::gen_data(&cfg, &console).map(drop),
        Command::TrainPilot => commands::train_pilot(&cfg, &console).map(drop),
        Command::GenSaliency => commands::gen_saliency(&cfg, &console).map(drop),
        Command::TrainFailcast => commands::train_failcast(&cfg, &console).map(drop),
        Command::Eval { .. } => commands::eval(&cfg, &console).map(drop),
        Command::Run => commands::run_pipeline(&cfg, &console),
        Command::ShowConfig => {
            cfg.validate()?;
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            Ok(())
        }
        Command::Gradcheck { .. } => unreachable!("handled above"),
    }
}
