//! Report schema, aggregation and file output.
//!
//! Every float in a written report carries 9 significant digits. Per-prompt
//! records are rounded first and the aggregates are computed from the
//! rounded records, so anyone recomputing EBS or flip rate from the file
//! lands on the reported value.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use biasscope_core::metrics::ebs;
use biasscope_core::pipeline::{BatchOutcome, SkippedPrompt};
use biasscope_core::PromptResult;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Bumped whenever a field changes meaning or disappears.
pub const SCHEMA_VERSION: u32 = 1;
pub const SIGNIFICANT_DIGITS: usize = 9;

pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x).parse().expect("formatted float parses")
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let r = round_sig(n.as_f64().expect("f64 number"));
            if let Some(num) = serde_json::Number::from_f64(r) {
                *n = num;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

/// `value` with every float rounded to the report precision.
pub fn rounded<T: Serialize + DeserializeOwned>(value: &T) -> Result<T> {
    let mut v = serde_json::to_value(value)?;
    round_value(&mut v);
    Ok(serde_json::from_value(v)?)
}

/// Aggregate metrics over one category (or all prompts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Results plus skipped prompts.
    pub n_prompts: usize,
    pub n_results: usize,
    pub skipped: usize,
    pub ebs_pre: Option<f64>,
    pub ebs_post: Option<f64>,
    pub flip_rate: Option<f64>,
    pub mean_bias_ratio_pre: Option<f64>,
    pub mean_bias_ratio_post: Option<f64>,
    /// Mean over prompts of `100 * (b_pre - b_post) / b_pre`.
    pub mean_bias_ratio_decrease_pct: Option<f64>,
    pub perplexity_pre: Option<f64>,
    pub perplexity_post: Option<f64>,
    /// Mean over prompts of `(ppl_post - ppl_pre) / ppl_pre`.
    pub mean_relative_perplexity_increase: Option<f64>,
    pub mean_inference_calls: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn bias_ratio_decrease_pct(r: &PromptResult) -> f64 {
    100.0 * (r.pre_b - r.post_b) / r.pre_b
}

pub fn aggregate(results: &[&PromptResult], skipped: usize) -> Result<Aggregate> {
    let n = results.len();
    let pre: Vec<f64> = results.iter().map(|r| r.pre_b).collect();
    let post: Vec<f64> = results.iter().map(|r| r.post_b).collect();
    let fluent: Vec<_> = results.iter().filter_map(|r| r.fluency.as_ref()).collect();
    let agg = Aggregate {
        n_prompts: n + skipped,
        n_results: n,
        skipped,
        ebs_pre: if n > 0 { Some(ebs(&pre)?) } else { None },
        ebs_post: if n > 0 { Some(ebs(&post)?) } else { None },
        flip_rate: (n > 0).then(|| results.iter().filter(|r| r.flipped).count() as f64 / n as f64),
        mean_bias_ratio_pre: mean(pre.iter().copied()),
        mean_bias_ratio_post: mean(post.iter().copied()),
        mean_bias_ratio_decrease_pct: mean(results.iter().map(|r| bias_ratio_decrease_pct(r))),
        perplexity_pre: mean(fluent.iter().map(|f| f.perplexity_pre)),
        perplexity_post: mean(fluent.iter().map(|f| f.perplexity_post)),
        mean_relative_perplexity_increase: mean(
            fluent.iter().map(|f| (f.perplexity_post - f.perplexity_pre) / f.perplexity_pre),
        ),
        mean_inference_calls: mean(results.iter().map(|r| r.inference_calls as f64)),
    };
    rounded(&agg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    /// Echo of the run configuration.
    pub config: Value,
    pub overall: Aggregate,
    pub by_category: BTreeMap<String, Aggregate>,
    /// How often each layer was edited by a committed plan step.
    pub layer_histogram: Vec<usize>,
    pub results: Vec<PromptResult>,
    pub skipped: Vec<SkippedPrompt>,
}

impl AuditReport {
    pub fn build(command: &str, config: Value, outcome: BatchOutcome, n_layers: usize) -> Result<Self> {
        let results: Vec<PromptResult> = outcome.results.iter().map(rounded).collect::<Result<_>>()?;
        let mut config = config;
        round_value(&mut config);

        let mut cats: BTreeMap<String, (Vec<&PromptResult>, usize)> = BTreeMap::new();
        for r in &results {
            cats.entry(r.category.clone()).or_default().0.push(r);
        }
        for s in &outcome.skipped {
            cats.entry(s.category.clone()).or_default().1 += 1;
        }
        let by_category = cats
            .iter()
            .map(|(c, (rs, sk))| Ok((c.clone(), aggregate(rs, *sk)?)))
            .collect::<Result<_>>()?;
        let all: Vec<&PromptResult> = results.iter().collect();
        let overall = aggregate(&all, outcome.skipped.len())?;

        let mut layer_histogram = vec![0usize; n_layers];
        for r in &results {
            for s in r.plan.effective_steps() {
                layer_histogram[s.layer] += 1;
            }
        }
        Ok(AuditReport {
            schema_version: SCHEMA_VERSION,
            tool_version: biasscope_core::VERSION.to_string(),
            command: command.to_string(),
            config,
            overall,
            by_category,
            layer_histogram,
            results,
            skipped: outcome.skipped,
        })
    }

    /// Fixed-width table of the aggregates.
    pub fn summary(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut out = format!(
            "{:<24} {:>6} {:>7} {:>8} {:>8} {:>6} {:>9} {:>9} {:>8}\n",
            "category", "n", "skipped", "ebs_pre", "ebs_post", "flips", "ppl_pre", "ppl_post", "b_dec_%"
        );
        let rows = self
            .by_category
            .iter()
            .map(|(c, a)| (c.as_str(), a))
            .chain(std::iter::once(("ALL", &self.overall)));
        for (name, a) in rows {
            out.push_str(&format!(
                "{:<24} {:>6} {:>7} {:>8} {:>8} {:>6} {:>9} {:>9} {:>8}\n",
                name,
                a.n_prompts,
                a.skipped,
                f(a.ebs_pre),
                f(a.ebs_post),
                f(a.flip_rate),
                f(a.perplexity_pre),
                f(a.perplexity_post),
                f(a.mean_bias_ratio_decrease_pct),
            ));
        }
        out
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Serializes rows as CSV in memory.
pub fn csv_bytes<R: Serialize>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner().map_err(|e| anyhow::anyhow!("csv flush failed: {e}"))?)
}
