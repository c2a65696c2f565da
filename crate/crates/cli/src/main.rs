//! `retina`: dataset preparation, training, evaluation, explanation and
//! report generation for retinal images.

mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use retina_core::language::KeywordMode;
use retina_core::report::GroupBy;
use retina_core::dataset::{Split, TextField};

#[derive(Debug, Parser)]
#[command(name = "retina", version, about = "Retinal disease identification, keyword-driven description and CAM reports")]
#[command(after_help = "Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.")]
pub struct Cli {
    /// Threads used for data loading, batch gradients and evaluation.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural dataset: manifest.json plus images/.
    SynthData(SynthArgs),
    /// Assign train/val/test splits to a manifest.
    Split(SplitArgs),
    /// Word-length histograms of keywords and descriptions (JSON on stdout).
    Stats(StatsArgs),
    /// Train the disease classifier (encoder).
    TrainRdi(TrainRdiArgs),
    /// Train the caption decoder on top of a trained encoder.
    TrainCdg(TrainCdgArgs),
    /// Score the full pipeline on one split (metrics JSON on stdout).
    Evaluate(EvaluateArgs),
    /// Class activation map and overlay for one image.
    Explain(ExplainArgs),
    /// HTML report for one image, or for a manifest split.
    Report(ReportArgs),
    /// Caption and ranking metrics from text files (JSON on stdout).
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub records: usize,
    /// Distinct finding phrases used in keywords and captions.
    #[arg(long, default_value_t = 8)]
    pub vocab_size: usize,
    /// Side length of the square images.
    #[arg(long, default_value_t = 32)]
    pub image_side: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Train,val,test fractions summing to 1 (test gets the remainder).
    #[arg(long, value_parser = parse_ratios, conflicts_with = "counts", required_unless_present = "counts")]
    pub ratios: Option<[f64; 3]>,
    /// Exact train,val,test sizes.
    #[arg(long, value_parser = parse_counts)]
    pub counts: Option<[usize; 3]>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep splits already present and only assign the remaining records.
    #[arg(long)]
    pub preserve: bool,
    /// Output manifest (defaults to rewriting --manifest in place).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StatsField {
    Keywords,
    Description,
    Both,
}

impl StatsField {
    pub fn fields(self) -> Vec<TextField> {
        match self {
            StatsField::Keywords => vec![TextField::Keywords],
            StatsField::Description => vec![TextField::Description],
            StatsField::Both => vec![TextField::Keywords, TextField::Description],
        }
    }
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = StatsField::Both)]
    pub field: StatsField,
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    /// JSON training config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Seed for initialization and shuffling (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainRdiArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory (checkpoints/encoder.ck, curves/encoder.csv).
    #[arg(long)]
    pub out: PathBuf,
    /// Start from this encoder checkpoint instead of a random init.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KeywordFlag {
    On,
    Off,
}

impl From<KeywordFlag> for KeywordMode {
    fn from(k: KeywordFlag) -> Self {
        match k {
            KeywordFlag::On => KeywordMode::On,
            KeywordFlag::Off => KeywordMode::Off,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainCdgArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Trained encoder checkpoint.
    #[arg(long)]
    pub encoder: PathBuf,
    /// Output directory (checkpoints/decoder.ck, curves/decoder.csv).
    #[arg(long)]
    pub out: PathBuf,
    /// Condition the decoder on keywords or not.
    #[arg(long, value_enum)]
    pub keyword_mode: Option<KeywordFlag>,
    /// Train the encoder together with the decoder.
    #[arg(long)]
    pub joint_finetune: bool,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitFlag {
    Train,
    Val,
    Test,
}

impl From<SplitFlag> for Split {
    fn from(s: SplitFlag) -> Self {
        match s {
            SplitFlag::Train => Split::Train,
            SplitFlag::Val => Split::Val,
            SplitFlag::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GroupFlag {
    None,
    Disease,
}

impl From<GroupFlag> for GroupBy {
    fn from(g: GroupFlag) -> Self {
        match g {
            GroupFlag::None => GroupBy::None,
            GroupFlag::Disease => GroupBy::Disease,
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub encoder: PathBuf,
    #[arg(long)]
    pub decoder: PathBuf,
    /// Beam width.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub beam: u64,
    /// Longest caption in tokens (defaults to the value stored with the decoder).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_len: Option<u64>,
    /// Divide beam scores by hypothesis length.
    #[arg(long)]
    pub length_normalize: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value_t = SplitFlag::Test)]
    pub split: SplitFlag,
    /// Comma-separated k values for Prec@k.
    #[arg(long, value_delimiter = ',', default_value = "1,5", value_parser = clap::value_parser!(u64).range(1..))]
    pub k: Vec<u64>,
    /// ROUGE-L recall weight.
    #[arg(long, default_value_t = 1.2)]
    pub rouge_beta: f64,
    /// Write metrics.json, reports/ and heatmaps/ here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Diseases listed per report row.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub top_k: u64,
    #[arg(long, value_enum, default_value_t = GroupFlag::None)]
    pub group_by: GroupFlag,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub encoder: PathBuf,
    /// Class name or index to explain (defaults to the top-1 prediction).
    #[arg(long)]
    pub class: Option<String>,
    /// Heatmap opacity in the overlay.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Output directory (heatmaps/).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["image", "manifest"]))]
pub struct ReportArgs {
    /// Single image to report on.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Comma-separated keywords for --image.
    #[arg(long, conflicts_with = "manifest")]
    pub keywords: Option<String>,
    /// Case id for --image (defaults to the file stem).
    #[arg(long, conflicts_with = "manifest")]
    pub id: Option<String>,
    /// Report on every record of --split instead of a single image.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Split reported with --manifest.
    #[arg(long, value_enum, default_value_t = SplitFlag::Test)]
    pub split: SplitFlag,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Diseases listed per row.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: u64,
    #[arg(long, value_enum, default_value_t = GroupFlag::None)]
    pub group_by: GroupFlag,
    /// Output directory (reports/, heatmaps/).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Candidate captions, one per line.
    #[arg(long, requires = "refs")]
    pub cand: Option<PathBuf>,
    /// Reference captions, one per line, aligned with --cand.
    #[arg(long, requires = "cand")]
    pub refs: Option<PathBuf>,
    /// Per line: truth label, then ranked labels.
    #[arg(long)]
    pub rankings: Option<PathBuf>,
    /// Comma-separated k values for Prec@k.
    #[arg(long, value_delimiter = ',', default_value = "1,5", value_parser = clap::value_parser!(u64).range(1..))]
    pub k: Vec<u64>,
    #[arg(long, default_value_t = 1.2)]
    pub rouge_beta: f64,
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String>
where
    T::Err: fmt::Display,
{
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got {}", parts.len()));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|e| format!("{p:?}: {e}"))?);
    }
    out.try_into().map_err(|_| unreachable!())
}

fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    parse_triple(s)
}

fn parse_counts(s: &str) -> Result<[usize; 3], String> {
    parse_triple(s)
}

/// A problem with the invocation rather than with the data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use retina_core::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<serde_json::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidArgument { .. } => 1,
                E::NonFinite(_) | E::Autograd(_) => 3,
                E::Shape { .. }
                | E::Checkpoint(_)
                | E::Manifest { .. }
                | E::ImageDecode { .. }
                | E::UnsupportedImage(_)
                | E::Data(_)
                | E::Io { .. }
                | E::Json(_) => 2,
            };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.workers as usize).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {} workers: {e}", cli.workers);
            return ExitCode::from(3);
        }
    };
    match pool.install(|| commands::run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
