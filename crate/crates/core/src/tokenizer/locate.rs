use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::TokenizedPrompt;
use crate::error::{Error, Result};

/// Token-index runs where a candidate entity occurs in a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSpans {
    pub candidate: String,
    /// Contiguous token-index runs, in text order.
    pub occurrences: Vec<Vec<usize>>,
}

impl CandidateSpans {
    pub fn is_found(&self) -> bool {
        !self.occurrences.is_empty()
    }

    /// First token of the first occurrence, used for localization.
    pub fn first_token_index(&self) -> Option<usize> {
        self.occurrences.first().and_then(|run| run.first().copied())
    }

    /// Every token index across all occurrences, used for scaling.
    pub fn all_indices(&self) -> BTreeSet<usize> {
        self.occurrences.iter().flatten().copied().collect()
    }

    pub fn require(self) -> Result<Self> {
        if self.is_found() {
            Ok(self)
        } else {
            Err(Error::CandidateNotFound(self.candidate))
        }
    }
}

/// Finds every token-aligned occurrence of `candidate` in the prompt text.
///
/// Each textual match is accepted in its leading-space form (the preceding
/// space starts a token) or, failing that, its bare form; either way the
/// match must end on a token boundary. Matching is case-sensitive.
pub fn locate_candidate(prompt: &TokenizedPrompt, candidate: &str) -> Result<CandidateSpans> {
    if candidate.is_empty() {
        return Err(Error::invalid("candidate must be non-empty"));
    }
    let starts: HashMap<usize, usize> = prompt
        .offsets
        .iter()
        .enumerate()
        .map(|(i, &(s, _))| (s, i))
        .collect();
    let ends: HashMap<usize, usize> = prompt
        .offsets
        .iter()
        .enumerate()
        .map(|(i, &(_, e))| (e, i))
        .collect();
    let text = prompt.text.as_str();
    let bytes = text.as_bytes();

    let mut occurrences = Vec::new();
    for (p, m) in text.match_indices(candidate) {
        let Some(&last) = ends.get(&(p + m.len())) else {
            continue;
        };
        let spaced = if p > 0 && bytes[p - 1] == b' ' {
            starts.get(&(p - 1))
        } else {
            None
        };
        if let Some(&first) = spaced.or_else(|| starts.get(&p)) {
            occurrences.push((first..=last).collect());
        }
    }
    Ok(CandidateSpans {
        candidate: candidate.to_string(),
        occurrences,
    })
}
