//! `drift`: command-line front end of the RF tomography workbench.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::parse_assignment;

#[derive(Parser, Debug)]
#[command(name = "drift", version, about = "RF tomography workbench with environment-change adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that reads a settings file.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// key=value settings file; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Any setting by key, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment)]
    pub set: Vec<(String, String)>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset
    Gen(GenArgs),
    /// Estimate the static noise envelope of the change detector
    Calibrate(CalibrateArgs),
    /// Pre-train the reconstruction network
    Train(TrainArgs),
    /// Run the change detector over an RSS stream
    Detect(DetectArgs),
    /// One-shot adaptation of a trained network to a new environment
    Finetune(FinetuneArgs),
    /// Reconstruct one recording with the network or the linear baseline
    Reconstruct(ReconstructArgs),
    /// Run the full continual-learning experiment
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tubers: Option<usize>,
    #[arg(long)]
    pub rotations: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Comma-separated environment ids
    #[arg(long)]
    pub envs: Option<String>,
}

#[derive(Args, Debug)]
pub struct DetectorFlags {
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Static recording: an rss.csv file or a sample directory
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Dataset root for the geometry (default: three levels above the recording)
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub detector: DetectorFlags,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Calibration file from `calibrate`, or a static rss.csv to calibrate on
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Event log path (default: standard output)
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub detector: DetectorFlags,
}

#[derive(Args, Debug)]
pub struct SplitFlags {
    /// Number of held-out test tubers
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Checkpoint path
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training environment (default: the dataset's first)
    #[arg(long)]
    pub env: Option<String>,
    #[command(flatten)]
    pub split: SplitFlags,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optional CSV of the per-epoch loss
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Post-change environment
    #[arg(long)]
    pub env: Option<String>,
    /// Adaptation tuber (default: the split's fine-tuning tuber)
    #[arg(long)]
    pub tuber: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Frames used from the end of each rotation
    #[arg(long)]
    pub window: Option<usize>,
    #[command(flatten)]
    pub split: SplitFlags,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub common: Common,
    /// Sample directory `<dataset>/<tuber>/<env>/<rotation>`
    #[arg(long)]
    pub sample: Option<PathBuf>,
    /// `neural` or `linear`
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Raw reconstruction PGM
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Post-processed region PGM
    #[arg(long)]
    pub region_out: Option<PathBuf>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub reg_lambda: Option<f64>,
    /// Environment of the empty-scene reference (default: the dataset's first)
    #[arg(long)]
    pub reference_env: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Report directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated transitions such as `E1->E2,E2->E3`
    #[arg(long)]
    pub transitions: Option<String>,
    #[command(flatten)]
    pub split: SplitFlags,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<drift_core::Error>())
        .map(drift_core::Error::kind)
        .unwrap_or("command");
    let mut msg = String::new();
    for part in err.chain().map(|e| e.to_string()) {
        if msg.ends_with(&part) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&part);
    }
    let msg = msg.replace(['\n', '\r'], " ");
    format!("error[{kind}]: {msg}")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Train(a) => commands::train(a),
        Command::Detect(a) => commands::detect(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            let usage = e
                .chain()
                .find_map(|e| e.downcast_ref::<drift_core::Error>())
                .is_some_and(|e| matches!(e, drift_core::Error::InvalidArgument(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
