//! `eedet` command-line driver.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit codes.
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_CHECK: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "eedet",
    version,
    about = "Early-exit empty-frame detection kit"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed, overriding the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Sequential execution. Every command already runs on one thread, so
    /// this is accepted for compatibility and changes nothing.
    #[arg(long, global = true)]
    pub single_thread: bool,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Continue an interrupted run: a checkpoint for train/qat, or the
    /// existing study file for hpo when given without a value.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "")]
    pub resume: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic train/test dataset.
    GenData,
    /// Train a float model.
    Train(TrainArgs),
    /// Quantization-aware fine-tuning of a float checkpoint.
    Qat(QatArgs),
    /// Evaluate a checkpoint: gated and ungated mAP plus exit metrics.
    Eval(EvalArgs),
    /// Sweep the exit threshold.
    Sweep(SweepArgs),
    /// Hyperparameter search over branch placement and training weights.
    Hpo(HpoArgs),
    /// Convert a QAT checkpoint to an int8 container.
    Export(ExportArgs),
    /// Gated integer inference over a dataset split.
    RunInt8(RunInt8Args),
    /// Cost and latency report of a model.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// `none` trains the static baseline without a branch.
    #[arg(long)]
    pub ee: Option<String>,
}

#[derive(Args, Debug)]
pub struct QatArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Float checkpoint to start from.
    #[arg(long)]
    pub from: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Exit threshold or `none`; defaults to the threshold stored in the
    /// checkpoint.
    #[arg(long)]
    pub tau: Option<String>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Static-model mAP for scoring operating points.
    #[arg(long)]
    pub baseline_map: Option<f64>,
}

#[derive(Args, Debug)]
pub struct HpoArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Backbone stage (1-5) the branch must attach to.
    #[arg(long)]
    pub stage: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// `pipeline` trains every trial; `stub` scores assignments with a
    /// closed-form function.
    #[arg(long, default_value = "pipeline")]
    pub evaluator: String,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// QAT checkpoint.
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Args, Debug)]
pub struct RunInt8Args {
    /// Int8 container written by export.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub tau: Option<String>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Checkpoint; the configured model is used when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Evaluation output whose skip rate drives the average cost.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub skip_rate: Option<f64>,
    /// Fail with exit code 3 unless the average cost is at least this
    /// fraction below the static model.
    #[arg(long)]
    pub min_mac_reduction: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
