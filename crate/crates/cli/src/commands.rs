//! One function per subcommand. Each returns the data it wrote so tests can
//! inspect it without re-reading files.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use biasscope_core::corpus::{load_dataset, write_custom_jsonl};
use biasscope_core::genlab::{count_difference_experiment, SweepGrid, SweepPrompt, SweepRow};
use biasscope_core::pipeline::{audit_prompt, par_map_prompts, BatchOutcome, PreparedPrompt, PromptSession};
use biasscope_core::{
    audit_batch, Approach, AtlasConfig, ComparativePrompt, LayerBiasProfile, LayerSetMode, ModelBundle, Source,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::{
    bundle_paths_checked, require_paths, AblationArgs, AuditArgs, DataArgs, DumpArgs, LocalizeArgs, ModelArgs,
    SweepArgs,
};
use crate::report::{csv_bytes, rounded, to_json_bytes, write_atomic, AuditReport, SCHEMA_VERSION};

pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.txt";

fn load_model(args: &ModelArgs) -> Result<ModelBundle> {
    let paths = bundle_paths_checked(args)?;
    ModelBundle::load(&paths).context("cannot load model")
}

fn load_prompts(data: &DataArgs) -> Result<Vec<ComparativePrompt>> {
    require_paths([data.dataset.as_path()])?;
    let report = load_dataset(data.kind, &data.dataset, data.category.as_deref(), data.limit)
        .with_context(|| format!("cannot read dataset {}", data.dataset.display()))?;
    for issue in &report.skipped {
        log::warn!("{} line {}: {}", data.dataset.display(), issue.line, issue.reason);
    }
    if report.prompts.is_empty() {
        bail!("no prompts in {} after filtering", data.dataset.display());
    }
    log::info!(
        "loaded {} prompts ({} malformed, {} filtered)",
        report.prompts.len(),
        report.skipped.len(),
        report.filtered
    );
    Ok(report.prompts)
}

fn config_echo(data: &DataArgs, config: &AtlasConfig, extra: serde_json::Value) -> serde_json::Value {
    json!({
        "dataset": data.dataset,
        "kind": data.kind,
        "category": data.category,
        "limit": data.limit,
        "atlas": config,
        "extra": extra,
    })
}

fn check_k(config: &AtlasConfig, bundle: &ModelBundle) -> Result<()> {
    config
        .validate(bundle.model.config().n_layers)
        .map_err(|e| anyhow!("invalid configuration: {e}"))
}

/// Runs the audit and writes `report.json` and `summary.txt` into the output directory.
pub fn cmd_audit(args: &AuditArgs) -> Result<AuditReport> {
    let bundle = load_model(&args.model)?;
    let config = args.atlas.to_config();
    check_k(&config, &bundle)?;
    let prompts = load_prompts(&args.data)?;
    let outcome = audit_batch(&bundle.model, &bundle.tokenizer, &prompts, &config, args.run.workers())?;
    if outcome.results.is_empty() {
        log::warn!("every prompt was skipped");
    }
    let echo = config_echo(&args.data, &config, json!({"model": args.model}));
    let report = AuditReport::build("audit", echo, outcome, bundle.model.config().n_layers)?;
    write_atomic(&args.run.out.join(REPORT_FILE), &to_json_bytes(&report)?)?;
    write_atomic(&args.run.out.join(SUMMARY_FILE), report.summary().as_bytes())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub layer: usize,
    pub attention_c1: f64,
    pub attention_c2: f64,
    /// Favored minus other candidate.
    pub delta_favored: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRow {
    pub layer: usize,
    pub head: usize,
    pub attention_c1: f64,
    pub attention_c2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub schema_version: u32,
    pub prompt_id: String,
    pub candidates: [String; 2],
    pub first_token_indices: [usize; 2],
    pub p1: f64,
    pub p2: f64,
    /// Candidate with the higher probability (1 or 2).
    pub favored: u8,
    pub ranking_difference: Vec<usize>,
    pub ranking_top_candidate: Vec<usize>,
    pub heatmap: Vec<HeatmapRow>,
    pub heads: Vec<HeadRow>,
}

fn localize_prompt(args: &LocalizeArgs) -> Result<ComparativePrompt> {
    if let (Some(path), Some(id)) = (&args.dataset, &args.prompt_id) {
        require_paths([path.as_path()])?;
        let report = load_dataset(args.kind, path, None, None)?;
        return report
            .prompts
            .into_iter()
            .find(|p| &p.id == id)
            .ok_or_else(|| anyhow!("prompt `{id}` not found in {}", path.display()));
    }
    match (&args.context, &args.question, &args.candidates) {
        (Some(c), Some(q), Some(cands)) if cands.len() == 2 => {
            let p = ComparativePrompt {
                id: "cli".into(),
                context: c.clone(),
                question: q.clone(),
                candidate_1: cands[0].clone(),
                candidate_2: cands[1].clone(),
                bias_category: "custom".into(),
                source: Source::Custom,
            };
            p.validate()?;
            Ok(p)
        }
        _ => bail!("give either --dataset with --prompt-id, or --context, --question and --candidates"),
    }
}

/// Writes `heatmap.csv`, `heads.csv` and `ranking.json` for one prompt.
pub fn cmd_localize(args: &LocalizeArgs) -> Result<Localization> {
    let bundle = load_model(&args.model)?;
    let prompt = localize_prompt(args)?;
    let prepared = PreparedPrompt::new(prompt, &bundle.tokenizer)?;
    let mut session = PromptSession::new(&bundle.model, &prepared, Default::default())?;
    let (probs, trace) = session.localize(None)?;
    let idx = prepared.first_token_indices();
    let profile = LayerBiasProfile::from_trace(&trace, idx, probs.higher_index, Approach::TopCandidate)?;

    let heatmap = (0..trace.n_layers())
        .map(|l| HeatmapRow {
            layer: l,
            attention_c1: profile.attention[0][l],
            attention_c2: profile.attention[1][l],
            delta_favored: profile.difference[l],
        })
        .collect();
    let mut heads = Vec::new();
    for l in 0..trace.n_layers() {
        for h in 0..trace.n_heads() {
            heads.push(HeadRow {
                layer: l,
                head: h,
                attention_c1: trace.get(l, h, idx[0]) as f64,
                attention_c2: trace.get(l, h, idx[1]) as f64,
            });
        }
    }
    let loc = rounded(&Localization {
        schema_version: SCHEMA_VERSION,
        prompt_id: prepared.prompt.id.clone(),
        candidates: [prepared.prompt.candidate_1.clone(), prepared.prompt.candidate_2.clone()],
        first_token_indices: idx,
        p1: probs.p1,
        p2: probs.p2,
        favored: probs.higher_index,
        ranking_difference: profile.ranking_for(Approach::Difference),
        ranking_top_candidate: profile.ranking_for(Approach::TopCandidate),
        heatmap,
        heads,
    })?;
    write_atomic(&args.out.join("heatmap.csv"), &csv_bytes(&loc.heatmap)?)?;
    write_atomic(&args.out.join("heads.csv"), &csv_bytes(&loc.heads)?)?;
    let ranking = json!({
        "schema_version": SCHEMA_VERSION,
        "prompt_id": loc.prompt_id,
        "candidates": loc.candidates,
        "favored": loc.favored,
        "p1": loc.p1,
        "p2": loc.p2,
        "ranking": {"difference": loc.ranking_difference, "top_candidate": loc.ranking_top_candidate},
    });
    write_atomic(&args.out.join("ranking.json"), &to_json_bytes(&ranking)?)?;
    Ok(loc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: String,
    pub n_results: usize,
    pub skipped: usize,
    pub mean_bias_ratio_decrease_pct: Option<f64>,
    pub mean_bias_ratio_pre: Option<f64>,
    pub mean_bias_ratio_post: Option<f64>,
    pub ebs_pre: Option<f64>,
    pub ebs_post: Option<f64>,
    pub flip_rate: Option<f64>,
}

/// Runs the audit once per layer-set mode; writes `ablation.csv` and `ablation.json`.
pub fn cmd_ablation(args: &AblationArgs) -> Result<Vec<AblationRow>> {
    let bundle = load_model(&args.model)?;
    let base = AtlasConfig { fluency_tokens: 0, ..args.atlas.to_config() };
    check_k(&base, &bundle)?;
    if args.modes.is_empty() {
        bail!("no layer-set modes given");
    }
    let prompts = load_prompts(&args.data)?;
    let n_layers = bundle.model.config().n_layers;
    let mut rows = Vec::new();
    for &mode in &args.modes {
        let config = AtlasConfig { mode, ..base.clone() };
        let outcome = audit_batch(&bundle.model, &bundle.tokenizer, &prompts, &config, args.run.workers())?;
        let report = AuditReport::build("ablation", json!(null), outcome, n_layers)?;
        let a = &report.overall;
        rows.push(AblationRow {
            mode: mode.to_string(),
            n_results: a.n_results,
            skipped: a.skipped,
            mean_bias_ratio_decrease_pct: a.mean_bias_ratio_decrease_pct,
            mean_bias_ratio_pre: a.mean_bias_ratio_pre,
            mean_bias_ratio_post: a.mean_bias_ratio_post,
            ebs_pre: a.ebs_pre,
            ebs_post: a.ebs_post,
            flip_rate: a.flip_rate,
        });
        log::info!("{mode}: {:?}% mean bias-ratio decrease", a.mean_bias_ratio_decrease_pct);
    }
    let modes: Vec<String> = args.modes.iter().map(LayerSetMode::to_string).collect();
    let echo = config_echo(&args.data, &base, json!({"modes": modes}));
    let doc = json!({
        "schema_version": SCHEMA_VERSION,
        "tool_version": biasscope_core::VERSION,
        "config": echo,
        "rows": rows,
    });
    write_atomic(&args.run.out.join("ablation.csv"), &csv_bytes(&rows)?)?;
    write_atomic(&args.run.out.join("ablation.json"), &to_json_bytes(&rounded(&doc)?)?)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCsvRow {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: usize,
    pub pre_diff: f64,
    pub post_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub grid: SweepGrid,
    pub trials: usize,
    pub n_prompts: usize,
    pub skipped: Vec<biasscope_core::pipeline::SkippedPrompt>,
    /// Cells whose post-intervention difference is lower / higher / equal.
    pub reduced: usize,
    pub increased: usize,
    pub unchanged: usize,
    pub rows: Vec<SweepRow>,
}

/// Distributions before and after each prompt's searched intervention.
pub fn sweep_prompts(
    bundle: &ModelBundle,
    prompts: &[ComparativePrompt],
    config: &AtlasConfig,
    workers: usize,
) -> Result<(Vec<SweepPrompt>, BatchOutcome)> {
    let quiet = AtlasConfig { fluency_tokens: 0, ..config.clone() };
    let mapped = par_map_prompts(prompts, workers, |p| {
        let prepared = PreparedPrompt::new(p.clone(), &bundle.tokenizer)?;
        let result = audit_prompt(&bundle.model, &prepared, &quiet)?;
        let hooks = quiet.hooks(&result.plan);
        let mut session = PromptSession::new(&bundle.model, &prepared, quiet.probability)?;
        let pre = session.distribution(None)?;
        let post = session.distribution(Some(&hooks))?;
        Ok(SweepPrompt {
            id: p.id.clone(),
            first_token_ids: prepared.candidate_tokens.first_ids(),
            pre,
            post,
        })
    })?;
    let mut out = Vec::new();
    let mut batch = BatchOutcome::default();
    for m in mapped {
        match m {
            Ok(sp) => out.push(sp),
            Err(s) => batch.skipped.push(s),
        }
    }
    Ok((out, batch))
}

/// Writes `sweep.csv` and `sweep.json`.
pub fn cmd_sweep(args: &SweepArgs) -> Result<SweepReport> {
    let bundle = load_model(&args.model)?;
    let config = args.atlas.to_config();
    check_k(&config, &bundle)?;
    let grid = SweepGrid {
        temperatures: args.temperatures.clone(),
        top_ps: args.top_ps.clone(),
        top_ks: args.top_ks.clone(),
    };
    if grid.cells().is_empty() {
        bail!("sweep grid has no cells");
    }
    let prompts = load_prompts(&args.data)?;
    let (sweep, batch) = sweep_prompts(&bundle, &prompts, &config, args.run.workers())?;
    if sweep.is_empty() {
        bail!("no usable prompts: all {} were skipped", batch.skipped.len());
    }
    let rows = rounded(&count_difference_experiment(&sweep, &grid, args.trials, config.seed)?)?;
    let csv_rows: Vec<SweepCsvRow> = rows
        .iter()
        .map(|r| SweepCsvRow {
            temperature: r.pre.temperature,
            top_p: r.pre.top_p,
            top_k: r.pre.top_k,
            pre_diff: r.pre.abs_difference,
            post_diff: r.post.abs_difference,
        })
        .collect();
    let reduced = rows.iter().filter(|r| r.reduced()).count();
    let increased = rows.iter().filter(|r| r.increased()).count();
    let report = SweepReport {
        schema_version: SCHEMA_VERSION,
        tool_version: biasscope_core::VERSION.to_string(),
        config: rounded(&config_echo(&args.data, &config, json!({"trials": args.trials})))?,
        grid,
        trials: args.trials,
        n_prompts: sweep.len(),
        skipped: batch.skipped,
        reduced,
        increased,
        unchanged: rows.len() - reduced - increased,
        rows,
    };
    write_atomic(&args.run.out.join("sweep.csv"), &csv_bytes(&csv_rows)?)?;
    write_atomic(&args.run.out.join("sweep.json"), &to_json_bytes(&report)?)?;
    Ok(report)
}

/// Normalizes a dataset to custom-schema JSONL on `out` (stdout when `None`).
pub fn cmd_corpus_dump(args: &DumpArgs) -> Result<usize> {
    let prompts = load_prompts(&args.data)?;
    let mut bytes = Vec::new();
    write_custom_jsonl(&prompts, &mut bytes)?;
    match &args.out {
        Some(path) => write_atomic(path, &bytes)?,
        None => {
            use std::io::Write;
            std::io::stdout().lock().write_all(&bytes)?;
        }
    }
    Ok(prompts.len())
}

/// Output directory used by a command, for messages.
pub fn describe_out(dir: &Path) -> PathBuf {
    std::fs::canonicalize(dir).unwrap_or_else(|_| dir.to_path_buf())
}
