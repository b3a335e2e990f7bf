mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nada_core::promptgen::VlmQueryKind;
use nada_core::segbox::ThresholdMode;

#[derive(Debug, Parser)]
#[command(name = "nada", version, about = "Detect objects in paintings from diffusion cross-attention")]
pub struct Cli {
    /// Root that relative paths are resolved against.
    #[arg(long, global = true, env = "NADA_DATA_DIR")]
    pub data_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset: a manifest and one attention stack per image.
    Fixtures(FixturesArgs),
    /// Propose classes per image.
    Propose(ProposeArgs),
    /// Train the embedding MLP proposer.
    Train(TrainArgs),
    /// Turn proposals and attention stacks into detections.
    Detect(DetectArgs),
    /// Score detections and/or proposals against a manifest.
    Eval(EvalArgs),
    /// Detection AP50 for fixed thresholds 0.1 to 0.9 and Otsu.
    Sweep(SweepArgs),
    /// Emit diffusion prompts for each image and label.
    Prompts(PromptsArgs),
    /// Emit vision-language model queries.
    Queries(QueriesArgs),
}

#[derive(Debug, Args)]
pub struct FixturesArgs {
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u32).range(1..))]
    pub images: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub min_blobs: usize,
    #[arg(long, default_value_t = 3)]
    pub max_blobs: usize,
    /// Side of the square attention grid.
    #[arg(long, default_value_t = 64)]
    pub grid: usize,
    /// Side of the square image in pixels.
    #[arg(long, default_value_t = 512)]
    pub image_size: u32,
    #[arg(long, default_value_t = 2)]
    pub timesteps: usize,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 0.005)]
    pub noise: f64,
    /// Builtin vocabulary for the labels (artdl or iconart).
    #[arg(long, default_value = "iconart")]
    pub vocabulary: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProposerKind {
    Wscp,
    ZscpChoice,
    ZscpScore,
    Clip,
    Yesno,
    Oracle,
}

#[derive(Debug, Args)]
pub struct ProposeArgs {
    #[arg(long, value_enum)]
    pub kind: ProposerKind,
    #[arg(long, short)]
    pub manifest: PathBuf,
    /// Image embeddings (wscp, clip).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// MLP checkpoint (wscp).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Class text embeddings keyed by label (clip).
    #[arg(long)]
    pub text_embeddings: Option<PathBuf>,
    /// Model answers as JSON lines (zscp-choice, zscp-score, yesno).
    #[arg(long)]
    pub transcripts: Option<PathBuf>,
    /// Score threshold for score answers.
    #[arg(long, default_value_t = nada_core::proposer::DEFAULT_TAU)]
    pub tau: f64,
    /// Cosine similarity threshold (clip).
    #[arg(long, default_value_t = nada_core::proposer::DEFAULT_SIMILARITY)]
    pub similarity: f64,
    /// Sigmoid threshold for multi-label MLP heads.
    #[arg(long, default_value_t = nada_core::proposer::DEFAULT_MULTI_LABEL_THRESHOLD)]
    pub threshold: f64,
    /// Output file; standard output when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Artdl,
    Iconart,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, short)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Iconart)]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DetectConfigArgs {
    /// `otsu` or a fixed value in [0, 1].
    #[arg(long, default_value = "otsu", value_parser = parse_threshold)]
    pub threshold: ThresholdMode,
    /// Threshold the raw map instead of the min-max normalized one.
    #[arg(long)]
    pub no_normalize: bool,
    /// Regions smaller than this fraction of the grid are dropped.
    #[arg(long, default_value_t = 0.005)]
    pub min_region_area: f64,
    /// Minimum marker separation as a fraction of the larger grid side.
    #[arg(long, default_value_t = 0.125)]
    pub marker_distance: f64,
    /// Rank all detections with confidence 1.
    #[arg(long)]
    pub uniform_scores: bool,
    /// Label remap table (JSON pairs file) or `iconart`, for stacks keyed by rendered labels.
    #[arg(long)]
    pub remap: Option<String>,
    /// Worker threads.
    #[arg(long, short, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub jobs: u32,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long, short)]
    pub manifest: PathBuf,
    /// Directory of attention stack files.
    #[arg(long, short)]
    pub stacks: PathBuf,
    #[arg(long, short)]
    pub proposals: PathBuf,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub config: DetectConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, short)]
    pub manifest: PathBuf,
    #[arg(long, short)]
    pub detections: Option<PathBuf>,
    #[arg(long, short)]
    pub proposals: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, short)]
    pub manifest: PathBuf,
    #[arg(long, short)]
    pub stacks: PathBuf,
    #[arg(long, short)]
    pub proposals: PathBuf,
    /// Also write the rows as JSON lines.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    pub config: DetectConfigArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PromptModeArg {
    Template,
    Caption,
}

#[derive(Debug, Args)]
pub struct PromptsArgs {
    #[arg(long, short)]
    pub manifest: PathBuf,
    /// Labels per image; ground-truth labels when absent.
    #[arg(long, short)]
    pub proposals: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PromptModeArg::Template)]
    pub mode: PromptModeArg,
    /// Caption records `{image_id, label, caption, token_start}` (caption mode).
    #[arg(long)]
    pub captions: Option<PathBuf>,
    #[arg(long, default_value_t = nada_core::promptgen::DEFAULT_TOKEN_BUDGET)]
    pub budget: usize,
    /// Label remap table (JSON pairs file) or `iconart`.
    #[arg(long)]
    pub remap: Option<String>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QueriesArgs {
    #[arg(long, value_parser = parse_query_kind)]
    pub kind: VlmQueryKind,
    /// Builtin vocabulary name; overridden by --manifest.
    #[arg(long, default_value = "iconart")]
    pub vocabulary: String,
    #[arg(long, short)]
    pub manifest: Option<PathBuf>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

fn parse_threshold(s: &str) -> Result<ThresholdMode, String> {
    if s.eq_ignore_ascii_case("otsu") {
        return Ok(ThresholdMode::Otsu);
    }
    let v: f64 = s
        .parse()
        .map_err(|_| format!("expected `otsu` or a number, got {s:?}"))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("threshold {v} outside [0, 1]"));
    }
    Ok(ThresholdMode::Fixed(v))
}

fn parse_query_kind(s: &str) -> Result<VlmQueryKind, String> {
    s.parse().map_err(|e: nada_core::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // a reader such as `head` closed the pipe early
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        let io = c
            .downcast_ref::<std::io::Error>()
            .or_else(|| match c.downcast_ref::<nada_core::Error>() {
                Some(nada_core::Error::Io(io)) => Some(io),
                _ => None,
            });
        io.is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
    })
}
