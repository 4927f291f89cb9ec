//! The `super` command line: generation, guidance caching, training, evaluation, ablation and map export.

pub mod commands;
pub mod manifest;

use std::ffi::OsString;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use super_core::data::Split;
use super_core::trainer::BatchReduction;

#[derive(Parser, Debug)]
#[command(name = "super", version, about = "Superclass-guided training and group-robust evaluation")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GuidanceKind {
    Oracle,
    Vlm,
}

impl GuidanceKind {
    pub fn tag(self) -> &'static str {
        match self {
            GuidanceKind::Oracle => "oracle",
            GuidanceKind::Vlm => "vlm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblateParam {
    Beta,
    Lambda2,
    Prompts,
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: super_core::Error| e.to_string())
}

fn parse_reduction(s: &str) -> Result<BatchReduction, String> {
    s.parse().map_err(|e: super_core::Error| e.to_string())
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic spurious-correlation dataset from a key=value spec.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Write the weights of the frozen stand-in vision-language model.
    InitVlm {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Precompute guidance maps for the training split.
    CacheGuidance {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        guidance: GuidanceKind,
        #[arg(long)]
        vlm_model: Option<PathBuf>,
    },
    /// Train a model and keep the epoch with the best validation worst-group accuracy.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        guidance: GuidanceKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        jtt: bool,
        #[arg(long)]
        detach_alpha: bool,
        /// Plain cross-entropy baseline on head 1, ignoring guidance.
        #[arg(long)]
        erm: bool,
        #[arg(long, value_parser = parse_reduction)]
        batch_reduction: Option<BatchReduction>,
        #[arg(long)]
        vlm_model: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Per-group accuracy report of a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// One training run per value with every other setting fixed.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        param: AblateParam,
        /// Comma-separated values, or a prompt-variants file for `prompts`.
        #[arg(long)]
        values: String,
        #[arg(long, value_enum, default_value = "oracle")]
        guidance: GuidanceKind,
        #[arg(long)]
        vlm_model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Original image, head maps and guidance map for selected samples.
    ExportMaps {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "oracle")]
        guidance: GuidanceKind,
        #[arg(long)]
        vlm_model: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

/// Runs one invocation and returns its exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code() as u8;
        }
    };
    let result = match cli.command {
        Command::Generate { spec, out, force } => commands::generate(&spec, &out, force),
        Command::InitVlm { out, seed, force } => commands::init_vlm(&out, seed, force),
        Command::CacheGuidance { data, config, guidance, vlm_model } => {
            commands::cache_guidance(&data, config.as_deref(), guidance, vlm_model.as_deref())
        }
        Command::Train { data, config, guidance, out, jtt, detach_alpha, erm, batch_reduction, vlm_model, force } => {
            commands::train(&commands::TrainArgs {
                data,
                config,
                guidance,
                out,
                jtt,
                detach_alpha,
                erm,
                batch_reduction,
                vlm_model,
                force,
            })
        }
        Command::Evaluate { data, checkpoint, split, out, force } => {
            commands::evaluate(&data, &checkpoint, split, &out, force)
        }
        Command::Ablate { data, config, param, values, guidance, vlm_model, out, force } => {
            commands::ablate(&commands::AblateArgs { data, config, param, values, guidance, vlm_model, out, force })
        }
        Command::ExportMaps { data, checkpoint, ids, out, guidance, vlm_model, force } => {
            commands::export_maps(&data, &checkpoint, &ids, &out, guidance, vlm_model.as_deref(), force)
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
