//! Command-line driver: demonstration generation, two-stage training,
//! closed-loop evaluation and reporting.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use graspldp::action_vae::VaeError;
use graspldp::datagen::DataError;
use graspldp::eval::EvalError;
use graspldp::latent_diffusion::DiffusionError;
use graspldp::netcore::{CheckpointError, NetError};

/// Environment variable naming the default dataset directory.
pub const DATA_ENV: &str = "GRASPLDP_DATA";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

fn from_net(e: NetError) -> CliError {
    match e {
        NetError::NonFinite(m) => CliError::Numeric(m),
        NetError::BadConfig(m) => CliError::Usage(m),
        other => CliError::Data(other.to_string()),
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::BadConfig(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<VaeError> for CliError {
    fn from(e: VaeError) -> Self {
        match e {
            VaeError::Net(n) => from_net(n),
            VaeError::BadConfig(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<DiffusionError> for CliError {
    fn from(e: DiffusionError) -> Self {
        match e {
            DiffusionError::Net(n) => from_net(n),
            DiffusionError::BadConfig(m) => CliError::Usage(m),
            DiffusionError::MissingVae => CliError::Usage(DiffusionError::MissingVae.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Vae(v) => v.into(),
            EvalError::Diffusion(d) => d.into(),
            EvalError::BadConfig(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "graspldp", version, about = "Grasp-guided latent diffusion policy: data, training, evaluation")]
pub struct Cli {
    /// Worker threads for data generation and evaluation; 1 gives bitwise reproducible output.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

/// Settings shared by every configurable command.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Plain key=value file applied over the defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// KEY=VALUE override applied after the config file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Master random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate successful demonstrations into a dataset directory.
    GenData {
        /// Number of training objects cycled over episodes.
        #[arg(long)]
        objects: Option<usize>,
        /// Requested number of demonstrations.
        #[arg(long)]
        episodes: Option<usize>,
        /// Output directory.
        #[arg(long, env = DATA_ENV)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the action-chunk autoencoder.
    TrainVae {
        /// Dataset directory.
        #[arg(long, env = DATA_ENV)]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Decode without a grasp pose.
        #[arg(long)]
        no_latent_guidance: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the latent denoiser on top of a frozen autoencoder.
    TrainLdp {
        /// Dataset directory.
        #[arg(long, env = DATA_ENV)]
        data: PathBuf,
        /// Autoencoder checkpoint.
        #[arg(long)]
        vae: Option<PathBuf>,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Drop the graspness cue channel and its reconstruction.
        #[arg(long)]
        no_cue: bool,
        /// Append the grasp pose to the denoiser condition.
        #[arg(long)]
        condition_guidance: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the policy on an evaluation suite.
    Eval {
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        ldp: PathBuf,
        /// in-domain, spatial, object, visual, cluttered-1..4 or dynamic.
        #[arg(long)]
        suite: Option<String>,
        /// Trials, or scenes for cluttered suites.
        #[arg(long)]
        episodes: Option<usize>,
        /// Grasp selection: hps, random, highest or nearest.
        #[arg(long)]
        select: Option<String>,
        /// Detect grasps only in the first control cycle.
        #[arg(long)]
        detect_once: bool,
        /// Expect a checkpoint trained without the graspness cue.
        #[arg(long)]
        no_cue: bool,
        /// Expect a checkpoint trained with the grasp pose as condition.
        #[arg(long)]
        condition_guidance: bool,
        /// Results file to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Summarize one or more results files.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        results: Vec<PathBuf>,
    },
}

/// Parses `args` and runs the command, writing progress to `out`. Returns the
/// process exit code.
pub fn run_with<I, T>(args: I, out: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(out, "error: {e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
