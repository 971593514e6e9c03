use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emt_core::FeatureMode;

mod commands;
mod error;

use error::CliError;

/// Early-media triage: dataset building, GBT training, fingerprinting and
/// call triage.
///
/// Set EMT_LOG (error|warn|info|debug|trace) to control log output on stderr.
#[derive(Debug, Parser)]
#[command(name = "emt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Turn teacher labels and recordings into train/test feature datasets.
    BuildDataset(BuildDatasetArgs),
    /// Train a gradient-boosted tree model on a dataset file.
    Train(TrainArgs),
    /// Confusion matrix, agreement and per-class precision/recall of a model on a dataset.
    Eval(EvalArgs),
    /// Manage and query the announcement fingerprint index.
    #[command(subcommand)]
    Fingerprint(FingerprintCommand),
    /// Triage early-media calls.
    #[command(subcommand)]
    Triage(TriageCommand),
    /// Measure triaged vs always-fingerprint cost, or evaluate the cost model.
    Bench(BenchArgs),
    /// Inspect feature extraction.
    #[command(subcommand)]
    Features(FeaturesCommand),
    /// Generate synthetic corpora, announcement libraries and call sets.
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Print machine-readable JSON instead of a human summary.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    /// JSON-lines teacher label files ({"recording_id", "frame_labels"} per line).
    #[arg(long, required = true, num_args = 1..)]
    pub labels: Vec<PathBuf>,
    /// Directory holding <recording_id>.wav for every labeled recording.
    #[arg(long)]
    pub audio_dir: PathBuf,
    /// CSV mapping teacher class ids to early-media classes.
    #[arg(long)]
    pub map: PathBuf,
    /// Output directory for train.emds, test.emds and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Feature representation: mel or mfcc.
    #[arg(long, default_value = "mel")]
    pub mode: FeatureMode,
    /// Seed for the train/test split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Share of each stratum's seconds held out for testing.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Label smoothing window in 10 ms frames (odd).
    #[arg(long, default_value_t = 301)]
    pub window: usize,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset (.emds).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Where to write the model (.emgb).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub iterations: u32,
    #[arg(long, default_value_t = 0.1)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 31)]
    pub max_leaves: u32,
    #[arg(long, default_value_t = 20)]
    pub min_samples_per_leaf: u32,
    /// Histogram bins per feature (at most 256).
    #[arg(long, default_value_t = 256)]
    pub bins: u16,
    /// L2 regularization on leaf values.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trained model (.emgb).
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset to evaluate on (.emds).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Expected feature mode; refused if the model or dataset disagree.
    #[arg(long)]
    pub mode: Option<FeatureMode>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Subcommand)]
enum FingerprintCommand {
    /// Add (or replace) one announcement in an index, creating the index if needed.
    Add(FpAddArgs),
    /// Look up the announcement playing in an audio file.
    Query(FpQueryArgs),
    /// Build an index from a directory of <announcement_id>.wav clips.
    Snapshot(FpSnapshotArgs),
}

#[derive(Debug, Args)]
pub struct FpAddArgs {
    /// Announcement registry CSV (announcement_id,sip_code,description).
    #[arg(long)]
    pub registry: PathBuf,
    /// Index snapshot to update.
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub id: String,
    #[arg(long)]
    pub audio: PathBuf,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct FpQueryArgs {
    #[arg(long)]
    pub registry: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub audio: PathBuf,
    /// Override the vote threshold stored in the index.
    #[arg(long)]
    pub min_votes: Option<u32>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct FpSnapshotArgs {
    #[arg(long)]
    pub registry: PathBuf,
    /// Directory of <announcement_id>.wav files.
    #[arg(long)]
    pub clips: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Subcommand)]
enum TriageCommand {
    /// Triage every .wav in a directory (call id = file stem).
    Run(TriageRunArgs),
}

#[derive(Debug, Args)]
pub struct TriageRunArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub registry: PathBuf,
    /// Directory of call recordings.
    #[arg(long)]
    pub calls: PathBuf,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
    /// Also fingerprint every call to measure the always-fingerprint cost.
    #[arg(long)]
    pub baseline: bool,
    /// Write one JSON decision per line here.
    #[arg(long)]
    pub decisions: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Model to classify with; a small model is trained on synthetic clips when omitted.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub calls: usize,
    /// Seconds of early media per call.
    #[arg(long, default_value_t = 4.0)]
    pub seconds: f64,
    /// Share of calls carrying an announcement.
    #[arg(long, default_value_t = 0.25)]
    pub fraction: f64,
    /// Announcements in the synthetic library.
    #[arg(long, default_value_t = 50)]
    pub library: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
    /// Skip measuring; evaluate the cost model with this classification cost (ms per call).
    #[arg(long, requires = "fingerprint_ms")]
    pub classify_ms: Option<f64>,
    /// Fingerprinting cost in ms per call, used with --classify-ms.
    #[arg(long, requires = "classify_ms")]
    pub fingerprint_ms: Option<f64>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Subcommand)]
enum FeaturesCommand {
    /// Print the 29x24 feature matrix of one second of a recording.
    Dump(FeaturesDumpArgs),
}

#[derive(Debug, Args)]
pub struct FeaturesDumpArgs {
    #[arg(long)]
    pub audio: PathBuf,
    #[arg(long, default_value = "mel")]
    pub mode: FeatureMode,
    /// Which whole second of the recording to dump.
    #[arg(long, default_value_t = 0)]
    pub second: usize,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Subcommand)]
enum SynthCommand {
    /// Recordings, teacher labels (labels.jsonl) and the aggregation map (map.csv).
    Corpus(SynthCorpusArgs),
    /// Announcement clips (clips/) and their registry (registry.csv).
    Library(SynthLibraryArgs),
    /// Call recordings drawn from a synthetic library, plus truth.jsonl.
    Calls(SynthCallsArgs),
}

#[derive(Debug, Args)]
pub struct SynthCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub recordings: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub min_seconds: u32,
    #[arg(long, default_value_t = 40)]
    pub max_seconds: u32,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SynthLibraryArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub count: usize,
    #[arg(long, default_value_t = 6.0)]
    pub seconds: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SynthCallsArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 4.0)]
    pub seconds: f64,
    #[arg(long, default_value_t = 0.25)]
    pub fraction: f64,
    /// Library to draw announcements from; must match `synth library`.
    #[arg(long, default_value_t = 50)]
    pub library_count: usize,
    #[arg(long, default_value_t = 6.0)]
    pub library_seconds: f64,
    #[arg(long, default_value_t = 42)]
    pub library_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

fn run(cli: Cli) -> Result<(), CliError> {
    use commands::*;
    match cli.command {
        Command::BuildDataset(a) => build_dataset(&a, a.output.json),
        Command::Train(a) => train(&a, a.output.json),
        Command::Eval(a) => eval(&a, a.output.json),
        Command::Fingerprint(FingerprintCommand::Add(a)) => fingerprint_add(&a, a.output.json),
        Command::Fingerprint(FingerprintCommand::Query(a)) => fingerprint_query(&a, a.output.json),
        Command::Fingerprint(FingerprintCommand::Snapshot(a)) => {
            fingerprint_snapshot(&a, a.output.json)
        }
        Command::Triage(TriageCommand::Run(a)) => triage_run(&a, a.output.json),
        Command::Bench(a) => bench(&a, a.output.json),
        Command::Features(FeaturesCommand::Dump(a)) => features_dump(&a, a.output.json),
        Command::Synth(SynthCommand::Corpus(a)) => synth_corpus(&a, a.output.json),
        Command::Synth(SynthCommand::Library(a)) => synth_library(&a, a.output.json),
        Command::Synth(SynthCommand::Calls(a)) => synth_calls(&a, a.output.json),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EMT_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
