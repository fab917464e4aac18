//! `bandfuse`: synthetic data generation, pretraining, fine-tuning and
//! diagnostics for the band-fusion encoder.
//!
//! Exit codes: 0 success, 1 usage or configuration problem, 2 data or
//! format problem, 3 numeric failure.

mod commands;
mod run_manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use bandfuse_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "bandfuse", version, about = "Multi-band fusion encoder: data, training and diagnostics")]
pub struct Cli {
    /// Seed for data generation, augmentation, shuffling and decoder init.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// TOML config; keys override the selected profile.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in profile used when no config file is given.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    pub profile: Profile,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic co-registered dataset.
    GenData {
        #[arg(long)]
        samples: u64,
    },
    /// SwAV pretraining; writes model.pvck and loss.csv.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Embeddings of whole samples (no bands dropped).
    Embed {
        #[command(flatten)]
        model: ModelArgs,
        /// Embed only the first N samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Diagnostic images with CSV sidecars.
    #[command(subcommand)]
    Diagnose(Diagnose),
    /// Two-stage segmentation fine-tuning of a pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        model: ModelArgs,
        /// Samples held out (from the end of the dataset) for validation.
        #[arg(long, default_value_t = 100)]
        val: usize,
        /// Band subset from the config's ablation list.
        #[arg(long, default_value = "all")]
        ablation: String,
    },
    /// Segmentation metrics of a fine-tuned checkpoint.
    EvalSeg {
        #[command(flatten)]
        model: ModelArgs,
        /// Probability maps to export as PGM.
        #[arg(long, default_value_t = 4)]
        maps: usize,
    },
    /// Per-module parameter counts.
    CountParams {
        /// Also build the model and count its tensors.
        #[arg(long)]
        enumerate: bool,
    },
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FeatureModeArg {
    Averaged,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Diagnose {
    /// Cosine similarity and L2 distance between global and local views.
    Similarity {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 16)]
        batch: usize,
    },
    /// Winning band per fusion head and position.
    Attention {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        sample: u64,
        /// Bands to replace by empty tokens, as `modality.band`.
        #[arg(long, value_delimiter = ',')]
        drop: Vec<String>,
    },
    /// Pyramid feature maps.
    Features {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        sample: u64,
        #[arg(long, value_enum, default_value_t = FeatureModeArg::Averaged)]
        mode: FeatureModeArg,
    },
    /// Prototype alignment strips of global (q) and local (p) views.
    Prototypes {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 3)]
        samples: usize,
    },
    /// Band drop masks of one sample's augmented views.
    Views {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: u64,
    },
}

fn exit_class(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Usage(_) | Error::Config(_) | Error::Param(_)) => 1,
        Some(Error::Numeric(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_class(&e))
        }
    }
}
