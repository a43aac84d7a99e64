//! Command-line surface for the diffguard toolkit.
//!
//! Subcommands: `train-embedding` (learn key-E for one image), `protect`
//! (anonymize or hide, emitting protected images plus key-I), `recover`
//! (rebuild the original from a key pair), and `eval` (the measurement
//! protocols). Flags may also be supplied through `DIFFGUARD_*` environment
//! variables or a TOML config file; precedence is flags > environment >
//! config file > per-mode defaults.

pub mod commands;
pub mod config;
pub mod error;
pub mod imgio;
pub mod keyfile;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use diffguard_core::pipelines::RunKind;

use commands::{CommonOpts, EvalArgs, EvalProtocol, ProtectArgs, RecoverArgs, TrainArgs};
use error::CliError;

#[derive(Parser)]
#[command(name = "diffguard", version, about = "Recoverable face privacy protection on diffusion backends")]
pub struct Cli {
    /// Optional TOML config file supplying defaults for the tunable flags.
    #[arg(long, global = true, env = "DIFFGUARD_CONFIG")]
    pub config: Option<PathBuf>,

    /// Allow commands to replace existing output files.
    #[arg(long, global = true)]
    pub overwrite: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProtectMode {
    Anonymize,
    Hide,
}

impl From<ProtectMode> for RunKind {
    fn from(m: ProtectMode) -> Self {
        match m {
            ProtectMode::Anonymize => RunKind::Anonymize,
            ProtectMode::Hide => RunKind::Hide,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Sr,
    Idrate,
    Recovery,
    Diversity,
}

impl From<Protocol> for EvalProtocol {
    fn from(p: Protocol) -> Self {
        match p {
            Protocol::Sr => EvalProtocol::Sr,
            Protocol::Idrate => EvalProtocol::Idrate,
            Protocol::Recovery => EvalProtocol::Recovery,
            Protocol::Diversity => EvalProtocol::Diversity,
        }
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Learn the per-image conditional embedding set (key-E).
    TrainEmbedding {
        /// Input image (PNG).
        image: PathBuf,
        /// Output key-E container path.
        #[arg(long)]
        out: PathBuf,
        /// Backend kind or full spec: oracle, toy, zero, plugin:<id>, or
        /// e.g. "toy:hidden=16".
        #[arg(long, env = "DIFFGUARD_BACKEND")]
        backend: Option<String>,
        /// Optimization steps.
        #[arg(long, env = "DIFFGUARD_STEPS")]
        steps: Option<usize>,
        /// Learning rate.
        #[arg(long, env = "DIFFGUARD_LR")]
        lr: Option<f64>,
        #[arg(long, env = "DIFFGUARD_SEED")]
        seed: Option<u64>,
        /// Square size images are resized to before entering the backend.
        #[arg(long, env = "DIFFGUARD_SIZE")]
        size: Option<u32>,
        /// Conditional embedding width.
        #[arg(long, env = "DIFFGUARD_EMBED_DIM")]
        embed_dim: Option<usize>,
        /// Tokens per stage embedding.
        #[arg(long, default_value_t = 1)]
        tokens: usize,
        /// Attention width inside the inversion network.
        #[arg(long, default_value_t = 32)]
        attn_dim: usize,
        /// Seed for the backend's fixed parameters (recorded in the key).
        #[arg(long, default_value_t = 1)]
        backend_seed: u64,
    },
    /// Protect an image: anonymize or hide its identity, emitting key-I.
    Protect {
        mode: ProtectMode,
        image: PathBuf,
        /// key-E container trained for this image.
        #[arg(long = "key-e")]
        key_e: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Embedding schedule split point.
        #[arg(long, env = "DIFFGUARD_TAU")]
        tau: Option<f64>,
        /// Noise strength.
        #[arg(long = "s-ns", env = "DIFFGUARD_S_NS")]
        s_ns: Option<f64>,
        /// Guidance scale.
        #[arg(long, env = "DIFFGUARD_LAMBDA")]
        lambda: Option<f64>,
        #[arg(long, env = "DIFFGUARD_SEED")]
        seed: Option<u64>,
        #[arg(long, env = "DIFFGUARD_STRIDE")]
        stride: Option<usize>,
        /// Write one energy record per guided step to trace.jsonl.
        #[arg(long)]
        trace: bool,
        /// Proceed even if the key was trained for a different image.
        #[arg(long)]
        force: bool,
    },
    /// Recover the original image from a bound key pair.
    Recover {
        #[arg(long = "key-i")]
        key_i: PathBuf,
        #[arg(long = "key-e")]
        key_e: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// When given, print recovery metrics against this reference image.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
    },
    /// Run an evaluation protocol.
    Eval {
        protocol: Protocol,
        /// Protocol CSV: sr "reference,candidate"; idrate
        /// "role,identity,path" (role probe/same/diff); diversity
        /// "group,path".
        #[arg(long)]
        input: Option<PathBuf>,
        /// Original image (recovery protocol).
        #[arg(long)]
        original: Option<PathBuf>,
        /// Recovered image (recovery protocol).
        #[arg(long)]
        recovered: Option<PathBuf>,
        #[arg(long, env = "DIFFGUARD_BACKEND")]
        backend: Option<String>,
        #[arg(long, env = "DIFFGUARD_SIZE")]
        size: Option<u32>,
        /// Append machine-readable JSON records here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let common = CommonOpts { config: cli.config, overwrite: cli.overwrite };
    match cli.command {
        Command::TrainEmbedding {
            image,
            out,
            backend,
            steps,
            lr,
            seed,
            size,
            embed_dim,
            tokens,
            attn_dim,
            backend_seed,
        } => commands::cmd_train_embedding(
            TrainArgs {
                image,
                out,
                backend,
                steps,
                lr,
                seed,
                size,
                embed_dim,
                tokens,
                attn_dim,
                backend_seed,
            },
            &common,
        ),
        Command::Protect { mode, image, key_e, out_dir, tau, s_ns, lambda, seed, stride, trace, force } => {
            commands::cmd_protect(
                ProtectArgs {
                    mode: mode.into(),
                    image,
                    key_e,
                    out_dir,
                    tau,
                    s_ns,
                    lambda,
                    seed,
                    stride,
                    trace,
                    force,
                },
                &common,
            )
        }
        Command::Recover { key_i, key_e, out, reference } => {
            commands::cmd_recover(RecoverArgs { key_i, key_e, out, reference }, &common)
        }
        Command::Eval { protocol, input, original, recovered, backend, size, out } => {
            commands::cmd_eval(
                EvalArgs {
                    protocol: protocol.into(),
                    input,
                    original,
                    recovered,
                    backend,
                    size,
                    out,
                },
                &common,
            )
        }
    }
}
