//! `fhvae`: command-line entry point for the training and evaluation pipeline.
//!
//! Exit status is 0 on success, 1 when a run fails and 2 for usage errors.
//! Failures print one line `error[<class>]: <message>` on stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Problems with the invocation itself (exit status 2).
#[derive(Debug)]
pub struct UsageError(pub String);

pub enum Failure {
    Usage(UsageError),
    Run(fhvae_core::Error),
}

impl From<UsageError> for Failure {
    fn from(e: UsageError) -> Self {
        Failure::Usage(e)
    }
}

impl From<fhvae_core::Error> for Failure {
    fn from(e: fhvae_core::Error) -> Self {
        Failure::Run(e)
    }
}

pub const OUT_ROOT_ENV: &str = "FHVAE_OUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "fhvae", version, about = "Disentangled speech representations with a factorized hierarchical VAE")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set pretrain.lr_fhvae=0.002`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Root seed for every source of randomness.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory (default: `$FHVAE_OUT_ROOT/<subcommand>`, or `runs/<subcommand>`).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads; 1 gives bitwise-reproducible metrics.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More log output (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compute log-mel features for a manifest of WAV files.
    Prepare {
        /// Corpus manifest (TSV).
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Generate the synthetic two-domain corpus.
    Synth,
    /// Train the FHVAE on control speech.
    Pretrain {
        /// Corpus manifest (TSV).
        #[arg(long)]
        manifest: PathBuf,
        /// Use every speaker instead of control speakers only.
        #[arg(long)]
        all_speakers: bool,
        /// Continue from `latest.ckpt` in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Continue training a pretrained checkpoint with extra loss terms.
    Finetune {
        /// Pretrained checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus manifest (TSV).
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated: adversarial, reference, gen_dys_only, disentangle.
        #[arg(long, value_delimiter = ',')]
        flags: Option<Vec<String>>,
        #[arg(long)]
        resume: bool,
    },
    /// Export posterior-mean features.
    Extract {
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus manifest (TSV).
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = fhvae_core::extract::EXTRACT_SHIFT)]
        shift: usize,
        /// z1, z2, both or fbank.
        #[arg(long, default_value = "both")]
        which: String,
    },
    /// Run an evaluation protocol.
    Eval {
        /// ood, indomain or kfold.
        #[arg(long)]
        protocol: String,
        /// Comma-separated subset of fbank, z1, z2, z12.
        #[arg(long, value_delimiter = ',', default_value = "z1")]
        input: Vec<String>,
        /// Checkpoint for latent inputs; omit for filterbank-only evaluation.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Corpus manifest (TSV).
        #[arg(long)]
        manifest: PathBuf,
        /// Independent repeats with seeds 0..repeats (default from config).
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Pretrain and finetune every variant on synthetic data and write the
    /// comparison grid.
    ReproduceSynth {
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Prepare { .. } => "prepare",
            Command::Synth => "synth",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Extract { .. } => "extract",
            Command::Eval { .. } => "eval",
            Command::ReproduceSynth { .. } => "reproduce-synth",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(UsageError(msg))) => {
            eprintln!("error[usage]: {}", msg.replace('\n', " "));
            eprintln!("Try 'fhvae --help' for more information.");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::from(1)
        }
    }
}
