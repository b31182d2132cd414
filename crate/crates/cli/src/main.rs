//! `posthoc`: reproducible pipelines for post-hoc performance estimation.
//!
//! Every subcommand writes its outputs plus a `manifest.json` (flags,
//! resolved settings, input digests, output digests) into `--out-dir`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use posthoc::data::Split;
use posthoc::estimators::EstimatorKind;
use posthoc::features::Profile;
use posthoc::metrics::Metric;
use serde::Serialize;

mod commands;
mod output;

#[derive(Parser)]
#[command(
    name = "posthoc",
    version,
    about = "Post-hoc performance estimation for black-box models"
)]
struct Cli {
    /// Log level (error, warn, info, debug, trace); overridden by RUST_LOG.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a preset.
    Synth(SynthArgs),
    /// Assign train_fc / train_posthoc / test labels, optionally after
    /// resampling classes to new frequencies.
    Split(SplitArgs),
    /// Per-image tp/fp/fn, precision, recall and F1 of one model.
    EvalMetrics(EvalArgs),
    /// Train a post-hoc estimator and save it as a model file.
    Train(TrainArgs),
    /// Apply a model file to a corpus.
    Predict(PredictArgs),
    /// ECE, Spearman, R² and reliability bins of a predictions file.
    Report(ReportArgs),
    /// Sweep the offloading fraction and compare policies.
    OffloadSweep(OffloadArgs),
    /// Train a per-image model selector and compare against fixed choices.
    SelectModel(SelectArgs),
    /// Performance estimation after a dataset shift.
    Shift(ShiftArgs),
    /// Estimator quality versus training-set size for both feature profiles.
    SampleComplexity(SampleComplexityArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskArg {
    Detection,
    Classification,
}

#[derive(Args, Serialize)]
pub struct CorpusArgs {
    /// Corpus in line-delimited JSON.
    #[arg(long)]
    pub input: PathBuf,
    /// Detected from the first record when absent.
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Inferred from the data when absent.
    #[arg(long)]
    pub num_classes: Option<usize>,
}

#[derive(Args, Serialize)]
pub struct OutArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Serialize)]
pub struct EstimatorArgs {
    /// f1, precision or recall for detection; accuracy for classification.
    #[arg(long)]
    pub metric: Option<Metric>,
    /// full, essential or custom:name1,name2,...
    #[arg(long, default_value = "full")]
    pub profile: Profile,
    /// boost, mlp, confidence, temp or vector.
    #[arg(long, default_value = "boost")]
    pub estimator: EstimatorKind,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Args, Serialize)]
pub struct HyperArgs {
    /// Boosting rounds.
    #[arg(long, default_value_t = 300)]
    pub rounds: usize,
    #[arg(long, default_value_t = 5)]
    pub depth: usize,
    #[arg(long, default_value_t = 0.7)]
    pub subsample: f64,
    /// Boosting learning rate.
    #[arg(long, default_value_t = 0.1)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 5)]
    pub min_leaf: usize,
    /// MLP training epochs.
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.03)]
    pub mlp_learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Gradient steps for vector scaling.
    #[arg(long, default_value_t = 2000)]
    pub vector_iterations: usize,
}

#[derive(Args, Serialize)]
pub struct SynthArgs {
    /// noiseless, basic, confidence-linked, offload, selection,
    /// feature-linked, classification or shift.
    #[arg(long)]
    pub preset: String,
    #[arg(long)]
    pub num_images: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Serialize)]
pub struct SplitArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Fractions for train_fc, train_posthoc and test.
    #[arg(long, default_value = "0.25,0.5,0.25")]
    pub fractions: String,
    /// Classes to keep before splitting (classification only).
    #[arg(long)]
    pub keep_classes: Option<String>,
    /// Relative frequencies of the kept classes.
    #[arg(long)]
    pub frequencies: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    /// Restrict to one split.
    #[arg(long)]
    pub split: Option<Split>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub model: String,
    #[command(flatten)]
    pub est: EstimatorArgs,
    /// Training split; train_posthoc for split corpora, else every record.
    #[arg(long)]
    pub split: Option<Split>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Serialize)]
pub struct PredictArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub model_file: PathBuf,
    /// Split to score; test for split corpora, else every record.
    #[arg(long)]
    pub split: Option<Split>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Serialize)]
pub struct ReportArgs {
    /// Predictions CSV with `predicted` and `true` columns.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Extra bin counts for an ECE sensitivity table, e.g. 5,15,20.
    #[arg(long)]
    pub sensitivity: Option<String>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Serialize)]
pub struct OffloadArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub client: String,
    /// Server model ids, comma separated.
    #[arg(long)]
    pub server: String,
    /// Offloading fractions, comma separated.
    #[arg(long, default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
    pub rho: String,
    /// Offload whenever the predicted gap clears the threshold, even if the
    /// gap is negative.
    #[arg(long)]
    pub no_gap_guard: bool,
    #[command(flatten)]
    pub est: EstimatorArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Serialize)]
pub struct SelectArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Candidate model ids, comma separated.
    #[arg(long)]
    pub models: String,
    #[command(flatten)]
    pub est: EstimatorArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Serialize)]
pub struct ShiftArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Serialize)]
pub struct SampleComplexityArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub model: String,
    /// Training sizes, comma separated.
    #[arg(long, default_value = "50,100,200,500,1000,2000")]
    pub sizes: String,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[command(flatten)]
    pub est: EstimatorArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .parse_env("RUST_LOG")
        .init();
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Split(a) => commands::split(a),
        Command::EvalMetrics(a) => commands::eval_metrics(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Report(a) => commands::report(a),
        Command::OffloadSweep(a) => commands::offload_sweep(a),
        Command::SelectModel(a) => commands::select_model(a),
        Command::Shift(a) => commands::shift(a),
        Command::SampleComplexity(a) => commands::sample_complexity(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let validation = err
                .downcast_ref::<posthoc::Error>()
                .is_some_and(posthoc::Error::is_validation);
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}
