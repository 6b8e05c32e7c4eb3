mod commands;
mod error;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use firesense::analysis::DEFAULT_MC_PASSES;
use firesense::eval::Protocol;

use overrides::ConfigOverrides;

#[derive(Parser, Debug)]
#[command(name = "firesense", version, about = "Next-day wildfire spread segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Clean,
    Inflated,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Clean => Protocol::Clean,
            ProtocolArg::Inflated => Protocol::Inflated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BuiltinModel {
    /// Predicts the previous-day fire mask.
    DummyCopyPrev,
}

/// Where predictions come from.
#[derive(clap::Args, Debug)]
#[group(required = true, multiple = false)]
pub struct ModelSource {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Built-in reference predictor.
    #[arg(long, value_enum)]
    model: Option<BuiltinModel>,
}

/// Dataset selection shared by the evaluation commands.
#[derive(clap::Args, Debug)]
pub struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Portion of the 8:1:1 split to use, seeded with the checkpoint seed.
    #[arg(long, value_enum, default_value = "all")]
    subset: Subset,
    #[arg(long, default_value_t = 16)]
    batch: usize,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a deterministic synthetic dataset.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Patch height and width.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Prevailing spread direction (N, NE, E, ...).
        #[arg(long, default_value = "E")]
        spread_bias: String,
        /// Probability of an unknown-label rectangle per patch.
        #[arg(long, default_value_t = 0.05)]
        unknown_prob: f64,
    },
    /// Normalization statistics of the (smoothed) training split.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use every sample instead of the training split.
        #[arg(long)]
        whole: bool,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Train a model and write checkpoint, history and config.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Separate validation file; `--data` is then used whole for training.
        #[arg(long)]
        val_data: Option<PathBuf>,
        /// Continue from a checkpoint (its stored config wins).
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
        /// Stop after this many epochs in this invocation; resume later.
        #[arg(long)]
        stop_after: Option<usize>,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Metrics and threshold sweep under one protocol.
    Eval {
        #[command(flatten)]
        source: ModelSource,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "clean")]
        protocol: ProtocolArg,
        /// Fixed threshold instead of the swept best.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Clean vs inflated scores for each model.
    Audit {
        /// Trained checkpoints (repeatable).
        #[arg(long)]
        ckpt: Vec<PathBuf>,
        /// Add the built-in copy-previous-mask predictor.
        #[arg(long)]
        dummy: bool,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-channel F1 drop when a channel is replaced by its mean.
    Importance {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Threshold to score at; defaults to the best unmasked one.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// MC-dropout mean and standard deviation rasters for one sample.
    Uncertainty {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample_id: u64,
        #[arg(long, default_value_t = DEFAULT_MC_PASSES)]
        passes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention gate rasters for one sample.
    Attention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample_id: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter and FLOP accounting.
    Count {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// One total row per architecture instead of the per-layer table.
        #[arg(long)]
        summary: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Finite-difference gradient check of every op family.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
