//! Attention-based localization and scaling of candidate bias in
//! decoder-only language models.
//!
//! The crate bundles a small GPT-2 compatible inference engine with
//! attention hooks ([`model`]), byte-level BPE ([`tokenizer`]), dataset
//! loaders ([`corpus`]), the bias metrics ([`metrics`]), layer localization
//! ([`localization`]), the greedy scaling search ([`intervention`],
//! [`pipeline`]) and sampler experiments ([`genlab`]).

pub mod bundle;
pub mod corpus;
mod error;
pub mod genlab;
pub mod intervention;
pub mod localization;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod synthetic;
pub mod tokenizer;

pub use bundle::{BundlePaths, ModelBundle};
pub use corpus::{ComparativePrompt, DatasetKind, LoadReport, Source};
pub use error::{Error, Result};
pub use intervention::{InterventionPlan, PlanStep, LAMBDA_GRID};
pub use localization::{Approach, LayerBiasProfile, LayerSetMode};
pub use metrics::{BiasMeasurement, CandidateProbabilities, ProbabilityMode};
pub use model::{AttentionTrace, InterventionHooks, ModelConfig, ModelWeights, ScalingHookSpec, Transformer};
pub use pipeline::{audit_batch, run_atlas, AtlasConfig, PromptResult};
pub use tokenizer::{BpeTokenizer, CandidateSpans, TokenizedPrompt};

/// Crate version, stamped into reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
