use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use super::{check_category, open_lines, ComparativePrompt, LoadReport, RecordIssue, Source};
use crate::error::{Error, Result};

pub const BBQ_CATEGORIES: [&str; 11] = [
    "Age",
    "Disability_status",
    "Gender_identity",
    "Nationality",
    "Physical_appearance",
    "Race_ethnicity",
    "Race_x_SES",
    "Race_x_gender",
    "Religion",
    "SES",
    "Sexual_orientation",
];

#[derive(Deserialize)]
struct BbqRecord {
    example_id: serde_json::Value,
    #[serde(default)]
    context_condition: Option<String>,
    category: String,
    context: String,
    question: String,
    ans0: String,
    ans1: String,
    ans2: String,
    #[serde(default)]
    answer_info: BTreeMap<String, Vec<String>>,
}

/// Surface forms tried, in order, when looking an answer up in the prompt.
fn surface_forms(answer: &str, info: Option<&Vec<String>>) -> Vec<String> {
    let mut forms = Vec::new();
    if let Some(short) = info.and_then(|v| v.first()) {
        forms.push(short.clone());
    }
    forms.push(answer.to_string());
    for article in ["The ", "the ", "A ", "a ", "An ", "an "] {
        if let Some(rest) = answer.strip_prefix(article) {
            forms.push(rest.to_string());
        }
    }
    let mut lowered = Vec::new();
    for f in &forms {
        let mut chars = f.chars();
        if let Some(c) = chars.next() {
            if c.is_uppercase() {
                lowered.push(c.to_lowercase().chain(chars).collect::<String>());
            }
        }
    }
    forms.extend(lowered);
    forms
}

fn is_unknown(info: Option<&Vec<String>>) -> bool {
    info.and_then(|v| v.get(1)).is_some_and(|g| g == "unknown")
}

fn record_to_prompt(rec: BbqRecord) -> Result<Option<ComparativePrompt>> {
    if rec.context_condition.as_deref().is_some_and(|c| c != "ambig") {
        return Ok(None);
    }
    let answers = [rec.ans0, rec.ans1, rec.ans2];
    let text = format!("{} {}", rec.context, rec.question);
    let mut candidates = Vec::new();
    for (i, ans) in answers.iter().enumerate() {
        let info = rec.answer_info.get(&format!("ans{i}"));
        if is_unknown(info) {
            continue;
        }
        let found = surface_forms(ans, info).into_iter().find(|f| !f.is_empty() && text.contains(f.as_str()));
        match found {
            Some(f) => candidates.push(f),
            None if rec.answer_info.is_empty() => continue,
            None => {
                return Err(Error::InvalidRecord(format!(
                    "answer `{ans}` has no surface form in the prompt"
                )));
            }
        }
    }
    if candidates.len() != 2 {
        return Err(Error::InvalidRecord(format!(
            "expected 2 non-unknown answers, found {}",
            candidates.len()
        )));
    }
    let id = match &rec.example_id {
        serde_json::Value::String(s) => s.clone(),
        v => v.to_string(),
    };
    let mut it = candidates.into_iter();
    let prompt = ComparativePrompt {
        id: format!("bbq-{}-{id}", rec.category),
        context: rec.context,
        question: rec.question,
        candidate_1: it.next().unwrap(),
        candidate_2: it.next().unwrap(),
        bias_category: rec.category,
        source: Source::Bbq,
    };
    prompt.validate()?;
    Ok(Some(prompt))
}

/// Loads ambiguous-context BBQ records, optionally restricted to one
/// category and capped at `limit` prompts per category.
pub fn load_bbq(path: &Path, category: Option<&str>, limit: Option<usize>) -> Result<LoadReport> {
    check_category(category, &BBQ_CATEGORIES)?;
    let mut report = LoadReport::default();
    let mut seen = BTreeMap::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<BbqRecord>(&line)
            .map_err(|e| Error::InvalidRecord(format!("not a BBQ record: {e}")))
            .and_then(record_to_prompt);
        match parsed {
            Ok(Some(p)) => report.push_capped(p, category, limit, &mut seen),
            Ok(None) => report.filtered += 1,
            Err(e) => report.skipped.push(RecordIssue {
                line: line_no,
                reason: e.to_string(),
            }),
        }
    }
    Ok(report)
}
