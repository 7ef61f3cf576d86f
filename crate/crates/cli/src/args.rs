//! Command-line surface.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use biasscope_core::intervention::STOP_TOLERANCE;
use biasscope_core::{Approach, AtlasConfig, BundlePaths, DatasetKind, LayerSetMode, ProbabilityMode, LAMBDA_GRID};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Only environment variable read by the tool: the directory holding
/// downloaded model bundles. `<dir>/gpt2` is used when `--model-dir` is absent.
pub const CACHE_DIR_ENV: &str = "BIASSCOPE_CACHE_DIR";

#[derive(Debug, Parser)]
#[command(name = "biasscope", version, about = "Locate and scale down candidate bias in decoder-only language models")]
pub struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Localize and intervene on every prompt, then write report.json and summary.txt.
    Audit(AuditArgs),
    /// Per-layer and per-head attention to both candidates for one prompt.
    Localize(LocalizeArgs),
    /// Compare layer-set modes by mean bias-ratio decrease.
    Ablation(AblationArgs),
    /// Sampler grid experiment counting candidate picks before and after intervention.
    Sweep(SweepArgs),
    /// Dataset utilities.
    #[command(subcommand)]
    Corpus(CorpusCommand),
}

#[derive(Debug, Subcommand)]
pub enum CorpusCommand {
    /// Write a dataset as normalized custom-schema JSONL.
    Dump(DumpArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Directory with config.json, model.safetensors, vocab.json and merges.txt.
    #[arg(long)]
    pub model_dir: Option<PathBuf>,
    /// Override the config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the weights file.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Override the tokenizer vocabulary.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Override the tokenizer merges.
    #[arg(long)]
    pub merges: Option<PathBuf>,
}

impl ModelArgs {
    pub fn paths(&self) -> Result<BundlePaths> {
        let dir = match &self.model_dir {
            Some(d) => d.clone(),
            None => match std::env::var_os(CACHE_DIR_ENV) {
                Some(cache) => PathBuf::from(cache).join("gpt2"),
                None => bail!("no model given: pass --model-dir or set {CACHE_DIR_ENV}"),
            },
        };
        let mut p = BundlePaths::in_dir(&dir);
        for (slot, over) in [
            (&mut p.config, &self.config),
            (&mut p.weights, &self.weights),
            (&mut p.vocab, &self.vocab),
            (&mut p.merges, &self.merges),
        ] {
            if let Some(o) = over {
                *slot = o.clone();
            }
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Dataset file.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Dataset format: bbq, crows-pairs, winogender or custom.
    #[arg(long, default_value = "custom", value_parser = parse_kind)]
    pub kind: DatasetKind,
    /// Keep only this bias category.
    #[arg(long)]
    pub category: Option<String>,
    /// At most this many prompts per category.
    #[arg(long)]
    pub limit: Option<usize>,
}

fn parse_kind(s: &str) -> Result<DatasetKind, String> {
    s.parse().map_err(|e: biasscope_core::Error| e.to_string())
}

fn parse_approach(s: &str) -> Result<Approach, String> {
    s.parse().map_err(|e: biasscope_core::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<LayerSetMode, String> {
    s.parse().map_err(|e: biasscope_core::Error| e.to_string())
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbabilityArg {
    FirstToken,
    FullSequence,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AtlasArgs {
    /// Number of layers to intervene on.
    #[arg(short, long, default_value_t = 3)]
    pub k: usize,
    /// Layer score: difference or top-candidate.
    #[arg(long, default_value = "top-candidate", value_parser = parse_approach)]
    pub approach: Approach,
    /// Layer set: top-k, top-1, random-k, middle-k or bottom-k.
    #[arg(long, default_value = "top-k", value_parser = parse_mode)]
    pub mode: LayerSetMode,
    /// Comma-separated λ grid, strictly decreasing within (0, 1].
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f32>>,
    /// Renormalize scaled attention rows to unit mass.
    #[arg(long)]
    pub renormalize_row: bool,
    /// Scale only the last prompt row, not the rows of generated tokens.
    #[arg(long)]
    pub prompt_row_only: bool,
    /// How candidate probabilities are read.
    #[arg(long, value_enum, default_value = "first-token")]
    pub probability: ProbabilityArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Greedy tokens generated for the perplexity check (0 disables it).
    #[arg(long, default_value_t = 16)]
    pub fluency_tokens: usize,
}

impl AtlasArgs {
    pub fn to_config(&self) -> AtlasConfig {
        AtlasConfig {
            k: self.k,
            approach: self.approach,
            mode: self.mode,
            lambda_grid: self.lambda_grid.clone().unwrap_or_else(|| LAMBDA_GRID.to_vec()),
            tolerance: STOP_TOLERANCE,
            renormalize_row: self.renormalize_row,
            apply_during_generation: !self.prompt_row_only,
            probability: match self.probability {
                ProbabilityArg::FirstToken => ProbabilityMode::FirstToken,
                ProbabilityArg::FullSequence => ProbabilityMode::FullSequence,
            },
            seed: self.seed,
            fluency_tokens: self.fluency_tokens,
        }
    }
}

impl Default for AtlasArgs {
    fn default() -> Self {
        AtlasArgs {
            k: 3,
            approach: Approach::TopCandidate,
            mode: LayerSetMode::TopK,
            lambda_grid: None,
            renormalize_row: false,
            prompt_row_only: false,
            probability: ProbabilityArg::FirstToken,
            seed: 0,
            fluency_tokens: 16,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory, created if missing.
    #[arg(short, long, default_value = "out")]
    pub out: PathBuf,
}

impl RunArgs {
    pub fn workers(&self) -> usize {
        self.workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .max(1)
    }
}

#[derive(Debug, Clone, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub atlas: AtlasArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct LocalizeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Dataset to take the prompt from (with --prompt-id).
    #[arg(long, requires = "prompt_id")]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "custom", value_parser = parse_kind)]
    pub kind: DatasetKind,
    /// Id of the prompt within --dataset.
    #[arg(long)]
    pub prompt_id: Option<String>,
    /// Raw prompt context (with --question and --candidates).
    #[arg(long, conflicts_with = "dataset", requires_all = ["question", "candidates"])]
    pub context: Option<String>,
    #[arg(long)]
    pub question: Option<String>,
    /// The two candidates, comma-separated.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub candidates: Option<Vec<String>>,
    #[arg(short, long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AblationArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub atlas: AtlasArgs,
    /// Layer-set modes to compare, comma-separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_mode,
          default_value = "top-k,top-1,random-k,middle-k,bottom-k")]
    pub modes: Vec<LayerSetMode>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub atlas: AtlasArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.8,1.4")]
    pub temperatures: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.8,0.95")]
    pub top_ps: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "5,30,80")]
    pub top_ks: Vec<usize>,
    /// Sampled generations per prompt and cell.
    #[arg(long, default_value_t = 15)]
    pub trials: usize,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output file; stdout when absent.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

/// Fails unless every path exists.
pub fn require_paths<'a>(paths: impl IntoIterator<Item = &'a std::path::Path>) -> Result<()> {
    let missing: Vec<String> = paths
        .into_iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        bail!("missing input files: {}", missing.join(", "));
    }
    Ok(())
}

pub fn bundle_paths_checked(model: &ModelArgs) -> Result<BundlePaths> {
    let p = model.paths()?;
    require_paths([p.config.as_path(), p.weights.as_path(), p.vocab.as_path(), p.merges.as_path()])
        .context("cannot load model")?;
    Ok(p)
}
