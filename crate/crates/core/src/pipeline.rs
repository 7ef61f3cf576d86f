//! Per-prompt audit: localize, search, measure.

use serde::{Deserialize, Serialize};

use crate::corpus::{ComparativePrompt, Source};
use crate::error::{Error, Result};
use crate::intervention::{
    greedy_lambda_search, steps_to_hooks, validate_grid, BiasProbe, InterventionPlan, LayerSearch,
    PlanStep, SearchConfig, LAMBDA_GRID, STOP_TOLERANCE,
};
use crate::localization::{select_layer_set, Approach, LayerBiasProfile, LayerSetMode};
use crate::metrics::{
    candidate_probabilities, perplexity, CandidateProbabilities, CandidateTokens, ProbabilityMode,
};
use crate::model::math::softmax_f64;
use crate::model::{AttentionTrace, InterventionHooks, KvCache, LogitRows, Transformer};
use crate::seed::SeedBuilder;
use crate::tokenizer::{locate_candidate, BpeTokenizer, CandidateSpans, TokenizedPrompt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasConfig {
    pub k: usize,
    pub approach: Approach,
    pub mode: LayerSetMode,
    pub lambda_grid: Vec<f32>,
    pub tolerance: f64,
    pub renormalize_row: bool,
    pub apply_during_generation: bool,
    pub probability: ProbabilityMode,
    pub seed: u64,
    /// Greedy tokens generated for the perplexity check; 0 disables it.
    pub fluency_tokens: usize,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        AtlasConfig {
            k: 3,
            approach: Approach::TopCandidate,
            mode: LayerSetMode::TopK,
            lambda_grid: LAMBDA_GRID.to_vec(),
            tolerance: STOP_TOLERANCE,
            renormalize_row: false,
            apply_during_generation: true,
            probability: ProbabilityMode::FirstToken,
            seed: 0,
            fluency_tokens: 16,
        }
    }
}

impl AtlasConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.k > n_layers {
            return Err(Error::Config(format!(
                "k = {} exceeds the model's {n_layers} layers",
                self.k
            )));
        }
        validate_grid(&self.lambda_grid)
    }

    pub fn hooks(&self, plan: &InterventionPlan) -> InterventionHooks {
        plan.to_hooks(self.apply_during_generation, self.renormalize_row)
    }
}

/// A prompt tokenized and with both candidates located.
#[derive(Debug, Clone)]
pub struct PreparedPrompt {
    pub prompt: ComparativePrompt,
    pub tokens: TokenizedPrompt,
    pub spans: [CandidateSpans; 2],
    pub candidate_tokens: CandidateTokens,
}

impl PreparedPrompt {
    pub fn new(prompt: ComparativePrompt, tok: &BpeTokenizer) -> Result<Self> {
        let tokens = tok.encode(&prompt.text())?;
        let s1 = locate_candidate(&tokens, &prompt.candidate_1)?.require()?;
        let s2 = locate_candidate(&tokens, &prompt.candidate_2)?.require()?;
        let candidate_tokens = CandidateTokens::resolve(tok, &prompt)?;
        Ok(PreparedPrompt {
            prompt,
            tokens,
            spans: [s1, s2],
            candidate_tokens,
        })
    }

    pub fn first_token_indices(&self) -> [usize; 2] {
        [
            self.spans[0].first_token_index().expect("located"),
            self.spans[1].first_token_index().expect("located"),
        ]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Evaluation context for one prompt. Every call re-runs only the last
/// prompt token on top of a cached prefix, since hooks touch nothing before
/// the anchor row.
pub struct PromptSession<'a> {
    model: &'a Transformer,
    prepared: &'a PreparedPrompt,
    prefix: KvCache,
    probability: ProbabilityMode,
    calls: usize,
}

impl<'a> PromptSession<'a> {
    pub fn new(model: &'a Transformer, prepared: &'a PreparedPrompt, probability: ProbabilityMode) -> Result<Self> {
        let ids = &prepared.tokens.token_ids;
        if ids.len() > model.config().max_context {
            return Err(Error::ContextOverflow {
                len: ids.len(),
                max_context: model.config().max_context,
            });
        }
        let prefix = model.prefill(&ids[..ids.len() - 1])?;
        Ok(PromptSession {
            model,
            prepared,
            prefix,
            probability,
            calls: 0,
        })
    }

    /// Model evaluations of the prompt so far.
    pub fn calls(&self) -> usize {
        self.calls
    }

    fn anchor(&self) -> usize {
        self.prepared.len() - 1
    }

    fn last_token(&self) -> u32 {
        *self.prepared.tokens.token_ids.last().expect("non-empty prompt")
    }

    /// Next-token distribution after the prompt.
    pub fn distribution(&mut self, hooks: Option<&InterventionHooks>) -> Result<Vec<f64>> {
        Ok(self.run(hooks, false)?.0)
    }

    fn run(&mut self, hooks: Option<&InterventionHooks>, capture: bool) -> Result<(Vec<f64>, Option<AttentionTrace>)> {
        self.calls += 1;
        let mut cache = self.prefix.clone();
        let out = self.model.extend(
            &mut cache,
            &[self.last_token()],
            hooks,
            Some(self.anchor()),
            capture,
            LogitRows::Last,
        )?;
        Ok((softmax_f64(out.last_row(self.model.vocab_size())), out.trace))
    }

    fn sequence_log_prob(&self, hooks: Option<&InterventionHooks>, seq: &[u32]) -> Result<f64> {
        let mut cache = self.prefix.clone();
        let mut input = vec![self.last_token()];
        input.extend_from_slice(&seq[..seq.len() - 1]);
        let out = self
            .model
            .extend(&mut cache, &input, hooks, Some(self.anchor()), false, LogitRows::All)?;
        let vocab = self.model.vocab_size();
        let mut total = 0.0;
        for (i, &t) in seq.iter().enumerate() {
            let dist = softmax_f64(out.row(i, vocab));
            total += dist[t as usize].max(f64::MIN_POSITIVE).ln();
        }
        Ok(total)
    }

    fn probabilities_from(&self, dist: &[f64], hooks: Option<&InterventionHooks>) -> Result<CandidateProbabilities> {
        let ct = &self.prepared.candidate_tokens;
        match self.probability {
            ProbabilityMode::FirstToken => candidate_probabilities(dist, ct),
            ProbabilityMode::FullSequence => {
                let p1 = self.sequence_log_prob(hooks, &ct.sequences[0])?.exp();
                let p2 = self.sequence_log_prob(hooks, &ct.sequences[1])?.exp();
                Ok(CandidateProbabilities::from_pair(p1, p2, ct.first_ids()))
            }
        }
    }

    pub fn probabilities(&mut self, hooks: Option<&InterventionHooks>) -> Result<CandidateProbabilities> {
        let (dist, _) = self.run(hooks, false)?;
        self.probabilities_from(&dist, hooks)
    }

    /// One pass returning candidate probabilities and the attention trace.
    pub fn localize(&mut self, hooks: Option<&InterventionHooks>) -> Result<(CandidateProbabilities, AttentionTrace)> {
        let (dist, trace) = self.run(hooks, true)?;
        let probs = self.probabilities_from(&dist, hooks)?;
        Ok((probs, trace.expect("trace requested")))
    }
}

struct SessionProbe<'s, 'a> {
    session: &'s mut PromptSession<'a>,
    config: &'s AtlasConfig,
    plan_targets: std::collections::BTreeSet<usize>,
    favored: u8,
    rerank_profiles: Vec<LayerBiasProfile>,
}

impl SessionProbe<'_, '_> {
    fn hooks(&self, steps: &[PlanStep]) -> InterventionHooks {
        steps_to_hooks(
            steps,
            &self.plan_targets,
            self.config.apply_during_generation,
            self.config.renormalize_row,
        )
    }
}

impl BiasProbe for SessionProbe<'_, '_> {
    fn evaluate(&mut self, steps: &[PlanStep]) -> Result<CandidateProbabilities> {
        let hooks = self.hooks(steps);
        self.session.probabilities(Some(&hooks))
    }

    fn rerank(&mut self, steps: &[PlanStep]) -> Result<Vec<usize>> {
        let hooks = self.hooks(steps);
        let (_, trace) = self.session.localize(Some(&hooks))?;
        let profile = LayerBiasProfile::from_trace(
            &trace,
            self.session.prepared.first_token_indices(),
            self.favored,
            self.config.approach,
        )?;
        let ranking = profile.ranking.clone();
        self.rerank_profiles.push(profile);
        Ok(ranking)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fluency {
    pub perplexity_pre: f64,
    pub perplexity_post: f64,
    pub generated_pre: Vec<u32>,
    pub generated_post: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptResult {
    pub id: String,
    pub category: String,
    pub source: Source,
    pub candidates: [String; 2],
    pub token_count: usize,
    pub pre: CandidateProbabilities,
    pub post: CandidateProbabilities,
    pub pre_b: f64,
    pub post_b: f64,
    /// The preferred candidate changed after intervention.
    pub flipped: bool,
    /// Layers chosen by the layer-set mode from the baseline ranking.
    pub layer_set: Vec<usize>,
    pub plan: InterventionPlan,
    /// Baseline localization.
    pub profile: LayerBiasProfile,
    /// Localizations recomputed between search steps.
    pub rerank_profiles: Vec<LayerBiasProfile>,
    pub search: Vec<LayerSearch>,
    /// Model evaluations of the prompt: localization passes plus λ trials.
    pub inference_calls: usize,
    pub localization_passes: usize,
    pub trial_evaluations: usize,
    pub fluency: Option<Fluency>,
}

/// Runs localization and the greedy search for one prepared prompt.
pub fn audit_prompt(model: &Transformer, prepared: &PreparedPrompt, config: &AtlasConfig) -> Result<PromptResult> {
    let n_layers = model.config().n_layers;
    config.validate(n_layers)?;
    let mut session = PromptSession::new(model, prepared, config.probability)?;
    let (pre, trace) = session.localize(None)?;
    let favored = pre.higher_index;
    let profile = LayerBiasProfile::from_trace(&trace, prepared.first_token_indices(), favored, config.approach)?;
    let targets = prepared.spans[(favored == 2) as usize].all_indices();

    let seed = SeedBuilder::new(config.seed).str(&prepared.prompt.id).finish();
    let layer_set = select_layer_set(&profile.ranking, config.mode, config.k, seed)?;
    let (pool, budget) = match config.mode {
        LayerSetMode::TopK => (None, config.k),
        LayerSetMode::Top1 => (None, 1),
        _ => (Some(layer_set.as_slice()), config.k),
    };
    let search_config = SearchConfig {
        k: budget,
        lambda_grid: config.lambda_grid.clone(),
        tolerance: config.tolerance,
    };
    let mut probe = SessionProbe {
        session: &mut session,
        config,
        plan_targets: targets.clone(),
        favored,
        rerank_profiles: Vec::new(),
    };
    let outcome = greedy_lambda_search(&mut probe, pre, &profile.ranking, pool, &search_config)?;
    let rerank_profiles = std::mem::take(&mut probe.rerank_profiles);

    let plan = InterventionPlan {
        steps: outcome.steps,
        target_indices: targets,
        k: budget,
        approach: config.approach,
    };
    let post = outcome.final_probabilities;
    let fluency = if config.fluency_tokens > 0 {
        Some(measure_fluency(model, prepared, &config.hooks(&plan), config.fluency_tokens)?)
    } else {
        None
    };
    let localization_passes = 1 + outcome.reranks;
    debug_assert_eq!(session.calls(), localization_passes + outcome.evaluations);
    Ok(PromptResult {
        id: prepared.prompt.id.clone(),
        category: prepared.prompt.bias_category.clone(),
        source: prepared.prompt.source,
        candidates: [prepared.prompt.candidate_1.clone(), prepared.prompt.candidate_2.clone()],
        token_count: prepared.len(),
        pre_b: pre.bias_ratio(),
        post_b: outcome.final_bias_ratio,
        flipped: post.higher_index != pre.higher_index,
        pre,
        post,
        layer_set,
        plan,
        profile,
        rerank_profiles,
        search: outcome.history,
        inference_calls: session.calls(),
        localization_passes,
        trial_evaluations: outcome.evaluations,
        fluency,
    })
}

/// Greedy continuations with and without `hooks`, and the perplexity of
/// prompt plus continuation under the same setting.
pub fn measure_fluency(
    model: &Transformer,
    prepared: &PreparedPrompt,
    hooks: &InterventionHooks,
    max_new_tokens: usize,
) -> Result<Fluency> {
    let ids = &prepared.tokens.token_ids;
    let room = model.config().max_context.saturating_sub(ids.len());
    let n = max_new_tokens.min(room);
    let anchor = ids.len() - 1;
    let hooks = (!hooks.is_empty()).then_some(hooks);

    let gen_pre = model.decode_greedy(ids, None, n)?;
    let gen_post = model.decode_greedy(ids, hooks, n)?;
    let mut seq_pre = ids.clone();
    seq_pre.extend(&gen_pre.tokens);
    let mut seq_post = ids.clone();
    seq_post.extend(&gen_post.tokens);
    Ok(Fluency {
        perplexity_pre: perplexity(model, &seq_pre, None, None)?,
        perplexity_post: perplexity(model, &seq_post, hooks, Some(anchor))?,
        generated_pre: gen_pre.tokens,
        generated_post: gen_post.tokens,
    })
}

/// Prepares and audits one prompt.
pub fn run_atlas(
    model: &Transformer,
    tok: &BpeTokenizer,
    prompt: &ComparativePrompt,
    config: &AtlasConfig,
) -> Result<PromptResult> {
    let prepared = PreparedPrompt::new(prompt.clone(), tok)?;
    audit_prompt(model, &prepared, config)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedPrompt {
    pub id: String,
    pub category: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct BatchOutcome {
    pub results: Vec<PromptResult>,
    pub skipped: Vec<SkippedPrompt>,
}

/// Maps `f` over prompts on `workers` threads, keeping input order. Failed
/// prompts are collected as skipped.
pub fn par_map_prompts<T, F>(prompts: &[ComparativePrompt], workers: usize, f: F) -> Result<Vec<std::result::Result<T, SkippedPrompt>>>
where
    T: Send,
    F: Fn(&ComparativePrompt) -> Result<T> + Sync,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| {
        prompts
            .par_iter()
            .map(|p| {
                f(p).map_err(|e| {
                    log::warn!("skipping prompt {}: {e}", p.id);
                    SkippedPrompt {
                        id: p.id.clone(),
                        category: p.bias_category.clone(),
                        reason: e.to_string(),
                    }
                })
            })
            .collect()
    }))
}

/// Audits every prompt; per-prompt failures are reported as skipped.
pub fn audit_batch(
    model: &Transformer,
    tok: &BpeTokenizer,
    prompts: &[ComparativePrompt],
    config: &AtlasConfig,
    workers: usize,
) -> Result<BatchOutcome> {
    config.validate(model.config().n_layers)?;
    let mut out = BatchOutcome::default();
    for r in par_map_prompts(prompts, workers, |p| run_atlas(model, tok, p, config))? {
        match r {
            Ok(res) => out.results.push(res),
            Err(s) => out.skipped.push(s),
        }
    }
    Ok(out)
}
