//! Masked-sentence datasets (CrowS-Pairs, WinoGender) turned into
//! "which word should replace [MASK]" questions.

use std::collections::BTreeMap;
use std::path::Path;

use super::{check_category, ComparativePrompt, LoadReport, RecordIssue, Source};
use crate::error::{Error, Result};

pub const MASK: &str = "[MASK]";

/// Builds a comparative prompt whose context is `sentence` (containing exactly
/// one `[MASK]`) and whose question offers both candidates.
///
/// The returned prompt has an empty id and category and `Source::Custom`;
/// loaders fill those in.
pub fn templatize_masked(sentence: &str, candidate_1: &str, candidate_2: &str) -> Result<ComparativePrompt> {
    let n = sentence.matches(MASK).count();
    if n != 1 {
        return Err(Error::InvalidRecord(format!(
            "expected exactly one {MASK} marker, found {n}"
        )));
    }
    let prompt = ComparativePrompt {
        id: String::new(),
        context: sentence.to_string(),
        question: format!("Which word should replace {MASK}: {candidate_1} or {candidate_2}?"),
        candidate_1: candidate_1.to_string(),
        candidate_2: candidate_2.to_string(),
        bias_category: String::new(),
        source: Source::Custom,
    };
    prompt.validate()?;
    Ok(prompt)
}

/// Reduces a minimal sentence pair to one masked sentence and the two
/// differing entities.
///
/// The differing span is everything between the longest common prefix and
/// suffix, widened to whole words on both sides.
pub fn extract_masked_pair(more: &str, less: &str) -> Result<(String, String, String)> {
    let a: Vec<char> = more.chars().collect();
    let b: Vec<char> = less.chars().collect();
    let max_common = a.len().min(b.len());
    let mut prefix = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    while prefix > 0 && a[prefix - 1].is_alphanumeric() {
        prefix -= 1;
    }
    let mut suffix = a
        .iter()
        .rev()
        .zip(b.iter().rev())
        .take(max_common - prefix)
        .take_while(|(x, y)| x == y)
        .count();
    while suffix > 0 && a[a.len() - suffix].is_alphanumeric() {
        suffix -= 1;
    }
    let span = |s: &[char]| -> String { s[prefix..s.len() - suffix].iter().collect() };
    let (raw_a, raw_b) = (span(&a), span(&b));
    let (ca, cb) = (raw_a.trim(), raw_b.trim());
    if ca.is_empty() || cb.is_empty() {
        return Err(Error::InvalidRecord("sentence pair has no differing entity".into()));
    }
    let lead = raw_a.len() - raw_a.trim_start().len();
    let trail = raw_a.len() - raw_a.trim_end().len();
    let head: String = a[..prefix].iter().collect();
    let tail: String = a[a.len() - suffix..].iter().collect();
    let masked = format!(
        "{head}{}{MASK}{}{tail}",
        &raw_a[..lead],
        &raw_a[raw_a.len() - trail..]
    );
    Ok((masked, ca.to_string(), cb.to_string()))
}

/// Loads the CrowS-Pairs CSV (`sent_more`, `sent_less`, `bias_type` columns).
pub fn load_crows_pairs(path: &Path, category: Option<&str>, limit: Option<usize>) -> Result<LoadReport> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::InvalidRecord(format!("{}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidRecord(format!("CrowS-Pairs file lacks `{name}` column")))
    };
    let (i_more, i_less, i_bias) = (col("sent_more")?, col("sent_less")?, col("bias_type")?);
    let i_index = headers.iter().position(|h| h.is_empty());

    let mut rows = Vec::new();
    let mut report = LoadReport::default();
    for (n, rec) in reader.records().enumerate() {
        let line = n + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                report.skipped.push(RecordIssue {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let get = |i: usize| rec.get(i).unwrap_or("").to_string();
        let id = i_index.map(get).filter(|s| !s.is_empty()).unwrap_or_else(|| (line - 2).to_string());
        let built = extract_masked_pair(&get(i_more), &get(i_less)).and_then(|(masked, c1, c2)| {
            let mut p = templatize_masked(&masked, &c1, &c2)?;
            p.id = format!("crows-{id}");
            p.bias_category = get(i_bias);
            p.source = Source::CrowsPairs;
            Ok(p)
        });
        match built {
            Ok(p) => rows.push(p),
            Err(e) => report.skipped.push(RecordIssue {
                line,
                reason: e.to_string(),
            }),
        }
    }
    let mut present: Vec<&str> = rows.iter().map(|p| p.bias_category.as_str()).collect();
    present.sort_unstable();
    present.dedup();
    check_category(category, &present)?;
    let mut seen = BTreeMap::new();
    for p in rows {
        report.push_capped(p, category, limit, &mut seen);
    }
    Ok(report)
}

const PRONOUN_SLOTS: [(&str, &str, &str); 3] = [
    ("$NOM_PRONOUN", "he", "she"),
    ("$POSS_PRONOUN", "his", "her"),
    ("$ACC_PRONOUN", "him", "her"),
];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

/// Loads WinoGender `templates.tsv` (occupation, participant, answer, sentence).
pub fn load_winogender(path: &Path, limit: Option<usize>) -> Result<LoadReport> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::InvalidRecord(format!("{}: {e}", path.display())))?;
    let mut report = LoadReport::default();
    let mut seen = BTreeMap::new();
    for (n, rec) in reader.records().enumerate() {
        let line = n + 2;
        let built = rec.map_err(Error::from).and_then(|rec| {
            if rec.len() < 4 {
                return Err(Error::InvalidRecord(format!("expected 4 columns, found {}", rec.len())));
            }
            let (occupation, participant, answer, template) = (&rec[0], &rec[1], &rec[2], &rec[3]);
            let (slot, he, she) = PRONOUN_SLOTS
                .iter()
                .find(|(slot, _, _)| template.contains(slot))
                .ok_or_else(|| Error::InvalidRecord("template has no pronoun slot".into()))?;
            let (he, she) = if template.starts_with(slot) {
                (capitalize(he), capitalize(she))
            } else {
                (he.to_string(), she.to_string())
            };
            let sentence = template
                .replace("$OCCUPATION", occupation)
                .replace("$PARTICIPANT", participant)
                .replace(slot, MASK);
            let mut p = templatize_masked(&sentence, &he, &she)?;
            p.id = format!("winogender-{}-{occupation}-{participant}-{answer}", n + 1);
            p.bias_category = "gender".into();
            p.source = Source::Winogender;
            Ok(p)
        });
        match built {
            Ok(p) => report.push_capped(p, None, limit, &mut seen),
            Err(e) => report.skipped.push(RecordIssue {
                line,
                reason: e.to_string(),
            }),
        }
    }
    Ok(report)
}
