use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod inputs;
mod plot;
mod run;
mod stacks;

/// Scores sarcomere organization of single-cell images on a 1.0 to 5.0 scale.
#[derive(Parser, Debug)]
#[command(name = "sarcscore", version, propagate_version = true)]
pub struct Cli {
    /// TOML file with [prepare], [split], [train], [model], [patchnet], [patch_train] and [synth] sections.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed for every random stream of the run (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Run directory (default: runs/<command>).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct MaturityArgs {
    /// Patch classifier checkpoint for the maturity-map channel.
    #[arg(long, value_name = "CKPT", conflicts_with = "no_maturity")]
    pub patchnet: Option<PathBuf>,

    /// Leave the maturity-map channel at zero instead of running a patch classifier.
    #[arg(long)]
    pub no_maturity: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TrainOverrides {
    /// Training epochs (overrides [train] epochs).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate (overrides [train] lr).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Mini-batch size (overrides [train] batch_size).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Architecture scale: toy, small or standard.
    #[arg(long, value_parser = commands::parse_preset)]
    pub preset: Option<sarcscore::Preset>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compute representation stacks for every image of a manifest.
    Prepare {
        /// CSV with columns `image_path,expert1,expert2`.
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        maturity: MaturityArgs,
        /// Leave the DC term out of the FFT power sum.
        #[arg(long)]
        exclude_dc: bool,
    },
    /// Train the patch classifier on a patch CSV or on synthetic patches.
    TrainPatchnet {
        /// CSV with columns `path,class_id` (paths relative to the CSV).
        #[arg(long)]
        patches: Option<PathBuf>,
        /// Synthetic patches per class when no CSV is given.
        #[arg(long, default_value_t = 40)]
        synthetic_per_class: usize,
        /// Fraction of patches held out for validation.
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Write maturity maps (8-bit PNG, values 0..=5) for images.
    InferPatchnet {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Images to process.
        images: Vec<PathBuf>,
        /// Process every image of a manifest as well.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train the scoring model on a labeled manifest.
    Train {
        /// CSV with columns `image_path,expert1,expert2`.
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of prepared stacks; missing or stale ones are recomputed.
        #[arg(long)]
        stacks: Option<PathBuf>,
        #[command(flatten)]
        maturity: MaturityArgs,
        /// Architecture variant, e.g. full, convnext_only, swin_only.
        #[arg(long)]
        variant: Option<String>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Score images with a trained model.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        images: Vec<PathBuf>,
        /// Precomputed stack for a single image.
        #[arg(long, conflicts_with = "stacks")]
        stack: Option<PathBuf>,
        #[arg(long)]
        stacks: Option<PathBuf>,
        #[command(flatten)]
        maturity: MaturityArgs,
    },
    /// Compute Spearman, MAE, MSE and R² for a model or a predictions file.
    Evaluate {
        #[arg(long, requires = "manifest", conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// `split.json` from a training run; restricts evaluation to one partition.
        #[arg(long)]
        split_file: Option<PathBuf>,
        /// Partition of --split-file: train, val or test.
        #[arg(long, default_value = "test")]
        partition: String,
        #[arg(long)]
        stacks: Option<PathBuf>,
        #[command(flatten)]
        maturity: MaturityArgs,
        /// CSV with columns `id,label,prediction`.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Also write scatter and label-histogram SVGs.
        #[arg(long)]
        plots: bool,
    },
    /// Train and compare architecture variants on one dataset.
    Ablate {
        /// CSV with columns `image_path,expert1,expert2`.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        stacks: Option<PathBuf>,
        #[command(flatten)]
        maturity: MaturityArgs,
        /// Comma-separated variants (default: the six standard ones).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Generate a synthetic labeled dataset and optionally texture patches.
    Synth {
        #[arg(long)]
        n: Option<usize>,
        /// Cell image side length in pixels.
        #[arg(long)]
        size: Option<usize>,
        /// Probability that the second expert is off by half a point.
        #[arg(long)]
        expert_noise: Option<f64>,
        /// Also write this many 96×96 patches per class.
        #[arg(long)]
        patches_per_class: Option<usize>,
    },
    /// Render SVG plots from run outputs.
    Plot {
        /// `history.json` from `train`.
        #[arg(long)]
        history: Option<PathBuf>,
        /// `eval_report.json` or `test_report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// `ablation.json` from `ablate`.
        #[arg(long)]
        ablation: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Prepare { .. } => "prepare",
            Command::TrainPatchnet { .. } => "train-patchnet",
            Command::InferPatchnet { .. } => "infer-patchnet",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::Synth { .. } => "synth",
            Command::Plot { .. } => "plot",
        }
    }
}

/// Machine-readable category of the first library error in the chain.
fn category(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<sarcscore::Error>() {
            return e.category();
        }
        if let Some(e) = cause.downcast_ref::<commands::CliError>() {
            return e.category;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "internal"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("error[{}]: {msg}", category(&err));
            ExitCode::FAILURE
        }
    }
}
