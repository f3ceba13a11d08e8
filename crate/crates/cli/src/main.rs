//! `geodiff`: reproducible, manifest-driven runs of the pipeline.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "geodiff",
    version,
    about = "Multimodal latent diffusion with per-modality timesteps"
)]
pub struct Cli {
    /// Run configuration (JSON); toy defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; every stage derives its own stream from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker cap. Computation is single-threaded, so only 1 is accepted.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic-world dataset.
    Dataset {
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's tile count.
        #[arg(long)]
        tiles: Option<usize>,
    },
    /// Train a convolutional codec for each listed image unit.
    TrainCodec {
        #[arg(long)]
        dataset: PathBuf,
        /// Units to train (default: every image unit).
        #[arg(long, value_delimiter = ',')]
        unit: Vec<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode and standardize every tile.
    Preencode {
        #[arg(long)]
        dataset: PathBuf,
        /// Directory of trained codecs; identity codecs elsewhere.
        #[arg(long)]
        codecs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser on a latent store.
    Train {
        #[arg(long)]
        latents: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate ensembles for test-split tiles.
    Sample(SampleArgs),
    /// Evaluate ensembles or run a model-driven protocol.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub latents: Option<PathBuf>,
    #[arg(long)]
    pub codecs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Conditioning set (unit or single-unit modality names).
    #[arg(long, value_delimiter = ',')]
    pub condition: Vec<String>,
    /// Generation set; defaults to every unit not conditioned on.
    #[arg(long, value_delimiter = ',')]
    pub generate: Vec<String>,
    /// Samples per tile (overrides the config).
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of test tiles (overrides the config).
    #[arg(long)]
    pub tiles: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    TileLevel,
    Peak,
    LeaveOneOut,
    Narrowing,
    Spectral,
    Latlon,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub protocol: Protocol,
    #[arg(long)]
    pub ensemble: Option<PathBuf>,
    /// Ground-truth dataset.
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Target unit or modality for leave-one-out, one unit for narrowing.
    #[arg(long)]
    pub target: Option<String>,
    /// Narrowing: modalities added one per rung after the unconditional one.
    #[arg(long, value_delimiter = ',', default_value = "DEM,LULC,time")]
    pub ladder: Vec<String>,
    /// Samples per tile for model-driven protocols (overrides the config).
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of test tiles for model-driven protocols (overrides the config).
    #[arg(long)]
    pub tiles: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = commands::classify(&e);
            let report = serde_json::json!({ "error": kind, "message": format!("{e:#}") });
            eprintln!("{report}");
            ExitCode::from(code)
        }
    }
}
