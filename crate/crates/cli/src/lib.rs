//! `gnet`: one entry point for data preparation, training, evaluation,
//! uncertainty, Grad-CAM and reporting.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors (the
//! message names the offending key), 1 for runtime failures.

mod analysis;
mod commands;
pub mod config;
mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub use config::{RunConfig, ENV_PREFIX};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<gnet_core::Error> for CliError {
    fn from(e: gnet_core::Error) -> Self {
        match e {
            gnet_core::Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn missing(key: &str, flag: &str) -> CliError {
    CliError::Config(format!("`{key}` is required (set it in the config or pass {flag})"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainVariant {
    /// Single-encoder baseline, MSE loss.
    Unet,
    /// Dual-encoder generator, MSE loss.
    Gnet,
    /// Dual-encoder generator against the attention discriminator.
    Gan,
    /// Dual-encoder generator with a log-variance head.
    Aleatoric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum UncertaintyArg {
    Epistemic,
    Aleatoric,
}

#[derive(Debug, Parser)]
#[command(name = "gnet", version, about = "Mask-conditioned adversarial precipitation nowcasting")]
struct Cli {
    /// TOML run configuration.
    #[arg(short, long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.batch_size=8`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory for this run (config key `run_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    run_dir: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate seeded synthetic train and test archives.
    Synth,
    /// Filter, crop, normalize and select sequences into the dataset container.
    PrepareData,
    /// Train one model variant.
    Train {
        variant: TrainVariant,
        /// Continue from the last epoch saved in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint (or persistence) on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "checkpoint")]
        persistence: bool,
    },
    /// Write predictions for selected samples.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Epistemic (test-time dropout) or aleatoric uncertainty summaries and maps.
    Uncertainty {
        kind: UncertaintyArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Grad-CAM heatmaps for one sample.
    Gradcam {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Activation site, e.g. `enc_map/d1/cbam`. Repeatable; default all.
        #[arg(long = "site")]
        sites: Vec<String>,
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Tables and charts from stored evaluation and uncertainty runs.
    Report {
        /// Run directories; replaces `report.inputs`.
        inputs: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> String {
        match self {
            Command::Synth => "synth".into(),
            Command::PrepareData => "prepare-data".into(),
            Command::Train { variant, .. } => format!("train-{}", variant_name(*variant)),
            Command::Evaluate { .. } => "evaluate".into(),
            Command::Predict { .. } => "predict".into(),
            Command::Uncertainty { kind, .. } => match kind {
                UncertaintyArg::Epistemic => "uncertainty-epistemic".into(),
                UncertaintyArg::Aleatoric => "uncertainty-aleatoric".into(),
            },
            Command::Gradcam { .. } => "gradcam".into(),
            Command::Report { .. } => "report".into(),
        }
    }
}

fn variant_name(v: TrainVariant) -> &'static str {
    match v {
        TrainVariant::Unet => "unet",
        TrainVariant::Gnet => "gnet",
        TrainVariant::Gan => "gan",
        TrainVariant::Aleatoric => "aleatoric",
    }
}

/// What every artifact directory records about the run that wrote it.
#[derive(Debug, Serialize, serde::Deserialize)]
pub struct Provenance {
    pub command: String,
    pub code_version: String,
    pub created: String,
    pub argv: Vec<String>,
    /// Model label for analysis commands.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

pub(crate) struct Invocation {
    pub command: String,
    pub argv: Vec<String>,
    pub cfg: RunConfig,
}

impl Invocation {
    /// Writes `<command>.config.toml` and `<command>.provenance.json` into `dir`.
    pub fn record(&self, dir: &Path, model: Option<String>) -> CliResult<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{}.config.toml", self.command)), self.cfg.to_toml()?)?;
        let prov = Provenance {
            command: self.command.clone(),
            code_version: gnet_core::code_version(),
            created: chrono::Utc::now().to_rfc3339(),
            argv: self.argv.clone(),
            model,
        };
        std::fs::write(
            dir.join(format!("{}.provenance.json", self.command)),
            serde_json::to_string_pretty(&prov)?,
        )?;
        Ok(())
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .try_init();
}

fn dispatch(cli: Cli, argv: Vec<String>, env: Vec<(String, String)>) -> CliResult<()> {
    let mut cfg = config::load(cli.config.as_deref(), env, &cli.sets)?;
    if let Some(d) = cli.run_dir {
        cfg.run_dir = d;
    }
    let command = cli.command.name();
    match cli.command {
        Command::Synth => commands::synth(Invocation { command, argv, cfg }),
        Command::PrepareData => commands::prepare_data(Invocation { command, argv, cfg }),
        Command::Train { variant, resume } => commands::train(Invocation { command, argv, cfg }, variant, resume),
        Command::Evaluate { checkpoint, persistence } => {
            if checkpoint.is_some() {
                cfg.evaluate.checkpoint = checkpoint;
            }
            cfg.evaluate.persistence |= persistence;
            analysis::evaluate(Invocation { command, argv, cfg })
        }
        Command::Predict { checkpoint } => {
            if checkpoint.is_some() {
                cfg.predict.checkpoint = checkpoint;
            }
            analysis::predict(Invocation { command, argv, cfg })
        }
        Command::Uncertainty { kind, checkpoint } => {
            if checkpoint.is_some() {
                cfg.uncertainty.checkpoint = checkpoint;
            }
            analysis::uncertainty(Invocation { command, argv, cfg }, kind)
        }
        Command::Gradcam { checkpoint, sites, sample } => {
            if checkpoint.is_some() {
                cfg.gradcam.checkpoint = checkpoint;
            }
            if !sites.is_empty() {
                cfg.gradcam.sites = sites;
            }
            if let Some(s) = sample {
                cfg.gradcam.sample = s;
            }
            analysis::gradcam(Invocation { command, argv, cfg })
        }
        Command::Report { inputs } => {
            if !inputs.is_empty() {
                cfg.report.inputs = inputs;
            }
            report::report(Invocation { command, argv, cfg })
        }
    }
}

/// Runs with an explicit environment (only `GNET__*` variables are read).
pub fn run_with_env<I, T>(argv: I, env: Vec<(String, String)>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(cli.verbose);
    let argv = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli, argv, env) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            e.exit_code()
        }
    }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with_env(argv, std::env::vars().collect())
}
