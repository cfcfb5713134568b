use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "forgeval", version, about = "Build, attack, calibrate and evaluate machine-text detection benchmarks")]
pub struct Cli {
    /// Print results as one JSON object on stdout and errors as JSON on stderr.
    #[arg(long, global = true)]
    pub json: bool,
    /// Print the resolved plan and exit without doing any work.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Suppress progress logs.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Build a labeled dataset from a human corpus and generators.
    Build(BuildArgs),
    /// Produce attacked variants of the machine records of a dataset.
    Attack(AttackArgs),
    /// Score train/val data and fit a calibration model.
    Calibrate(CalibrateArgs),
    /// Score a test set (and attacked variants) and write a run directory.
    Evaluate(EvaluateArgs),
    /// Classify a single text.
    Detect(DetectArgs),
    #[command(subcommand)]
    Report(ReportCmd),
    /// Train a character n-gram scorer.
    TrainLm(TrainLmArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// List registered detectors or attacks.
    #[command(subcommand)]
    Registry(RegistryCmd),
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub parallelism: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file or build directory.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// File with [[attacks]] entries.
    #[arg(long)]
    pub attacks: Option<PathBuf>,
    #[arg(long, value_parser = ["append", "replace"])]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub detector: Option<String>,
    /// File with [[detectors]] handles to register.
    #[arg(long)]
    pub detectors: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, value_parser = ["fixed_half", "max_f1_val"])]
    pub policy: Option<String>,
    #[arg(long)]
    pub l2_lambda: Option<f64>,
    #[arg(long)]
    pub sample_k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// n-gram LM artifact used as the token scorer.
    #[arg(long, conflicts_with_all = ["scorer_command", "scorer_url"])]
    pub lm: Option<PathBuf>,
    /// External token scorer command (whitespace-separated).
    #[arg(long, conflicts_with = "scorer_url")]
    pub scorer_command: Option<String>,
    #[arg(long)]
    pub scorer_url: Option<String>,
    #[arg(long)]
    pub lm_order: Option<usize>,
    #[arg(long)]
    pub lm_alpha: Option<f64>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Calibration model file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub detector: Option<String>,
    #[arg(long)]
    pub detectors: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Calibration used for the attacked file (must match --model).
    #[arg(long)]
    pub attacked_model: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub attacked: Option<PathBuf>,
    #[arg(long, conflicts_with_all = ["scorer_command", "scorer_url"])]
    pub lm: Option<PathBuf>,
    #[arg(long, conflicts_with = "scorer_url")]
    pub scorer_command: Option<String>,
    #[arg(long)]
    pub scorer_url: Option<String>,
    /// Comma-separated subset of source,lang,model,attack.
    #[arg(long)]
    pub slices: Option<String>,
    /// Comma-separated FPR levels, e.g. 0.01,0.001.
    #[arg(long = "fpr")]
    pub fpr_levels: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[arg(long)]
    pub detector: String,
    #[arg(long)]
    pub detectors: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, conflicts_with = "stdin")]
    pub text: Option<String>,
    /// Read the text from standard input.
    #[arg(long)]
    pub stdin: bool,
    #[arg(long, conflicts_with_all = ["scorer_command", "scorer_url"])]
    pub lm: Option<PathBuf>,
    #[arg(long, conflicts_with = "scorer_url")]
    pub scorer_command: Option<String>,
    #[arg(long)]
    pub scorer_url: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CompareFormat {
    Text,
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
pub enum ReportCmd {
    /// Compare the reports of several run directories.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        allow_mixed: bool,
        #[arg(long, value_enum, default_value = "text")]
        format: CompareFormat,
    },
    /// Recompute a run's reports from its predictions and diff them.
    Audit { run: PathBuf },
}

#[derive(Args, Debug)]
pub struct TrainLmArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub order: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Train only on records with this label (0 or 1).
    #[arg(long)]
    pub label: Option<u8>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    #[arg(long, default_value_t = forgeval_service::DEFAULT_WORKERS)]
    pub workers: usize,
    /// Artifact root; defaults to $FORGEVAL_HOME.
    #[arg(long)]
    pub home: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum RegistryCmd {
    Detectors,
    Attacks,
}
