mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Bad flags, config keys or values: reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "avts", version, about = "Audio-visual speech-to-unit translation on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Run name; outputs go to $AVTS_RUNS_DIR/<name> (default runs/<name>)
    #[arg(long)]
    name: Option<String>,
    /// key=value config file (`#` comments)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Config override, e.g. --set train.lr=0.002 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Normal,
    Small,
    Tiny,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModalityArg {
    Av,
    A,
    V,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistillArg {
    None,
    #[value(name = "av_full")]
    AvFull,
    #[value(name = "v_decoder")]
    VDecoder,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (waveforms, lip features, target units, manifest)
    GenData {
        /// Corpus size (default tiny, or data.preset from the config)
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Corpus seed (the language itself is shared across seeds)
        #[arg(long)]
        seed: Option<u64>,
        /// Audio-only corpus in the same language, for the speech-to-unit teacher
        #[arg(long)]
        teacher: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Precompute stacked log-mel features for every utterance of a corpus
    ExtractFeatures {
        /// Corpus directory or manifest
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Fit a k-means codebook on training audio features and quantize every utterance
    ClusterUnits {
        /// Corpus directory or manifest
        #[arg(long)]
        data: PathBuf,
        /// Number of clusters (overrides units.k)
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Masked-prediction pretraining of the frontends and encoder
    Pretrain {
        /// Corpus directory or manifest
        #[arg(long)]
        data: PathBuf,
        /// Start from this checkpoint instead of a fresh model
        #[arg(long, value_name = "CKPT")]
        from: Option<PathBuf>,
        /// Seed override
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a translation model
    Train {
        /// Corpus directory or manifest
        #[arg(long)]
        data: PathBuf,
        /// Input modality: av, a or v
        #[arg(long, value_enum, default_value = "av")]
        modality: ModalityArg,
        /// Initialize parameter groups from the --from checkpoint
        #[arg(long, value_enum, default_value = "none")]
        distill: DistillArg,
        /// Checkpoint to start from (whole model with --distill none)
        #[arg(long, value_name = "CKPT")]
        from: Option<PathBuf>,
        /// Seed override
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the audio-only speech-to-unit teacher (50 Hz audio by default)
    Teacher {
        /// Corpus directory or manifest
        #[arg(long)]
        data: PathBuf,
        /// Seed override
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a student initialized from a teacher checkpoint
    DistillTrain {
        /// Corpus directory or manifest
        #[arg(long)]
        data: PathBuf,
        /// Input modality: av, a or v
        #[arg(long, value_enum, default_value = "av")]
        modality: ModalityArg,
        /// Teacher checkpoint
        #[arg(long, value_name = "CKPT")]
        from: PathBuf,
        /// Transfer plan; defaults to av_full, or v_decoder for --modality v
        #[arg(long, value_enum)]
        distill: Option<DistillArg>,
        /// Seed override
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Unit BLEU of one checkpoint in one condition
    Eval {
        /// Model checkpoint
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        /// Corpus directory or manifest
        #[arg(long)]
        data: PathBuf,
        /// Input modality: av, a or v
        #[arg(long, value_enum, default_value = "av")]
        modality: ModalityArg,
        /// Clean audio (the default when no noise is given)
        #[arg(long, conflicts_with_all = ["category", "snr"])]
        clean: bool,
        /// Noise category: babble, music or speech
        #[arg(long, requires = "snr")]
        category: Option<String>,
        /// SNR in dB for --category
        #[arg(long, requires = "category", allow_hyphen_values = true)]
        snr: Option<f64>,
        /// Split to score: train, valid or test
        #[arg(long, default_value = "test")]
        split: String,
        /// Seed override
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// BLEU over a grid of noise categories, SNRs and modalities
    Sweep {
        /// Model checkpoint
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        /// Corpus directory or manifest
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated SNRs in dB
        #[arg(long, default_value = "-10,-5,0,5,10", allow_hyphen_values = true)]
        snr_grid: String,
        /// Comma-separated noise categories
        #[arg(long, default_value = "babble,music,speech")]
        categories: String,
        /// Comma-separated modalities (av, a, v)
        #[arg(long, default_value = "av,a")]
        modalities: String,
        /// Also emit one clean row per modality
        #[arg(long)]
        clean: bool,
        /// Also write per-curve CSVs and an SVG chart
        #[arg(long)]
        plot: bool,
        /// Split to score: train, valid or test
        #[arg(long, default_value = "test")]
        split: String,
        /// Seed override
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Per-curve CSVs and an SVG chart from a sweep CSV
    Plot {
        /// Sweep CSV written by `sweep`
        #[arg(long, value_name = "CSV")]
        csv: PathBuf,
        /// Skip the SVG chart
        #[arg(long)]
        no_svg: bool,
        #[command(flatten)]
        run: RunArgs,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
