//! `bavt`: phantom generation, training, evaluation, ablation and inspection.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 data error,
//! 3 training divergence.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bavt::sdt::BoundaryLossMode;

#[derive(Parser, Debug)]
#[command(name = "bavt", version, about = "Boundary-aware ViT vessel segmentation on synthetic phantoms")]
pub struct Cli {
    /// Single worker thread and zero wall-clock fields, for byte-identical reruns.
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// Root for default output directories.
    #[arg(long, global = true, env = "BAVT_OUT_ROOT", default_value = "runs")]
    pub out_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a phantom dataset with a manifest.
    Gen(GenArgs),
    /// Train a model on the train/val splits of a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train with and without the boundary term and compare.
    Ablate(AblateArgs),
    /// Dump distance maps, augmentation previews or model statistics.
    #[command(subcommand)]
    Inspect(InspectCommand),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value_t = 134)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of samples assigned to training; the rest is halved into val and test.
    #[arg(long, default_value_t = bavt::phantom::DEFAULT_SPLIT_RATIO)]
    pub ratio: f64,
    #[arg(long, default_value_t = 2)]
    pub n_trees: usize,
    #[arg(long, default_value_t = 3)]
    pub branch_depth: usize,
    #[arg(long, default_value_t = 3.0)]
    pub width_root: f64,
    #[arg(long, default_value_t = 0.75)]
    pub width_decay: f64,
    #[arg(long, default_value_t = 0.03)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 0.8)]
    pub background: f64,
    #[arg(long, default_value_t = 0.35)]
    pub contrast: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct LossOverrides {
    /// Boundary-loss weight; 0 trains the plain cross-entropy baseline.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Boundary-loss form: `signed` or `absolute`.
    #[arg(long)]
    pub mode: Option<BoundaryLossMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: LossOverrides,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Preprocessing settings; the architecture must match the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: bavt::phantom::Split,
    #[arg(long, default_value_t = bavt::metrics::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Write one ROC polyline CSV per image.
    #[arg(long)]
    pub roc: bool,
    /// Write thresholded prediction PNGs.
    #[arg(long)]
    pub save_preds: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Weight of the boundary term in the boundary-aware run.
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    #[arg(long)]
    pub mode: Option<BoundaryLossMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = bavt::metrics::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum InspectCommand {
    /// Signed distance map of a mask as a float grid and a PNG.
    Sdt {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Before/after panels of one augmentation draw.
    Augment {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter and FLOP counts of an architecture.
    Model {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Errors caused by how the tool was invoked rather than by the data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<bavt::Error>() {
            return match e {
                bavt::Error::Divergence { .. } => 3,
                e if e.is_data_error() => 2,
                _ => 1,
            };
        }
    }
    2
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
    if cli.deterministic {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            eprintln!("warning: could not pin thread pool: {e}");
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
