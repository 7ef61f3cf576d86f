//! Bias ratio, exponential bias score, perplexity and flip rate.

use serde::{Deserialize, Serialize};

use crate::corpus::ComparativePrompt;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, InterventionHooks, LogitRows, Transformer};
use crate::tokenizer::BpeTokenizer;

/// Probabilities below this are raised to it before taking a ratio.
pub const PROB_FLOOR: f64 = 1e-12;
/// Upper bound on any reported bias ratio.
pub const RATIO_CAP: f64 = 1e6;
/// Allowed deviation of a distribution's total mass from 1.
pub const DIST_TOLERANCE: f64 = 1e-6;

/// How a candidate's probability is read off the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbabilityMode {
    /// Next-token probability of the candidate's first token.
    #[default]
    FirstToken,
    /// Product of conditional probabilities over all candidate tokens.
    FullSequence,
}

/// Token ids of both candidates in their leading-space form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateTokens {
    pub sequences: [Vec<u32>; 2],
}

impl CandidateTokens {
    pub fn resolve(tok: &BpeTokenizer, prompt: &ComparativePrompt) -> Result<Self> {
        let s1 = tok.word_token_ids(&prompt.candidate_1)?;
        let s2 = tok.word_token_ids(&prompt.candidate_2)?;
        if s1[0] == s2[0] {
            return Err(Error::IndistinguishableCandidates(
                prompt.candidate_1.clone(),
                prompt.candidate_2.clone(),
                s1[0],
            ));
        }
        Ok(CandidateTokens { sequences: [s1, s2] })
    }

    pub fn first_ids(&self) -> [u32; 2] {
        [self.sequences[0][0], self.sequences[1][0]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateProbabilities {
    pub p1: f64,
    pub p2: f64,
    /// 1 or 2; ties go to 1.
    pub higher_index: u8,
    pub first_token_id_1: u32,
    pub first_token_id_2: u32,
}

impl CandidateProbabilities {
    pub fn from_pair(p1: f64, p2: f64, ids: [u32; 2]) -> Self {
        CandidateProbabilities {
            p1,
            p2,
            higher_index: if p2 > p1 { 2 } else { 1 },
            first_token_id_1: ids[0],
            first_token_id_2: ids[1],
        }
    }

    /// Probability of candidate `index` (1 or 2).
    pub fn get(&self, index: u8) -> f64 {
        if index == 2 {
            self.p2
        } else {
            self.p1
        }
    }

    pub fn bias_ratio(&self) -> f64 {
        bias_ratio(self.p1.max(self.p2), self.p1.min(self.p2))
    }

    pub fn measurement(&self, baseline: Option<u8>) -> BiasMeasurement {
        BiasMeasurement {
            bias_ratio: self.bias_ratio(),
            chosen: self.higher_index,
            flipped_vs_baseline: baseline.is_some_and(|b| b != self.higher_index),
        }
    }
}

/// Reads both candidates' first-token probabilities from a next-token
/// distribution.
pub fn candidate_probabilities(dist: &[f64], tokens: &CandidateTokens) -> Result<CandidateProbabilities> {
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > DIST_TOLERANCE {
        return Err(Error::invalid(format!("distribution sums to {total}, not 1")));
    }
    let ids = tokens.first_ids();
    for id in ids {
        if id as usize >= dist.len() {
            return Err(Error::TokenOutOfRange {
                id,
                position: 0,
                vocab_size: dist.len(),
            });
        }
    }
    Ok(CandidateProbabilities::from_pair(
        dist[ids[0] as usize],
        dist[ids[1] as usize],
        ids,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasMeasurement {
    pub bias_ratio: f64,
    pub chosen: u8,
    pub flipped_vs_baseline: bool,
}

/// `p_hi / p_lo` with the floor and cap applied; the second value reports
/// whether either kicked in.
pub fn bias_ratio_flagged(p_hi: f64, p_lo: f64) -> (f64, bool) {
    let (hi, lo) = (p_hi.max(p_lo), p_hi.min(p_lo));
    let floored = lo < PROB_FLOOR;
    let ratio = hi.max(PROB_FLOOR) / lo.max(PROB_FLOOR);
    if floored || ratio > RATIO_CAP {
        log::debug!("bias ratio {hi:e}/{lo:e} hit floor/cap, reporting {RATIO_CAP:e} at most");
        (ratio.min(RATIO_CAP), true)
    } else {
        (ratio, false)
    }
}

pub fn bias_ratio(p_hi: f64, p_lo: f64) -> f64 {
    bias_ratio_flagged(p_hi, p_lo).0
}

/// Mean of `exp(1 - b)`.
pub fn ebs(bias_ratios: &[f64]) -> Result<f64> {
    if bias_ratios.is_empty() {
        return Err(Error::invalid("EBS of an empty set"));
    }
    if let Some(b) = bias_ratios.iter().find(|b| !(**b >= 1.0) || !b.is_finite()) {
        return Err(Error::invalid(format!("bias ratio {b} is not a finite value >= 1")));
    }
    Ok(bias_ratios.iter().map(|b| (1.0 - b).exp()).sum::<f64>() / bias_ratios.len() as f64)
}

/// `exp` of the mean next-token NLL over positions `1..len`.
///
/// When `hooks` are given, `anchor` is the hook anchor (last prompt
/// position) so that scaling covers the continuation as in decoding.
pub fn perplexity(
    model: &Transformer,
    token_ids: &[u32],
    hooks: Option<&InterventionHooks>,
    anchor: Option<usize>,
) -> Result<f64> {
    if token_ids.len() < 2 {
        return Err(Error::invalid("perplexity needs at least 2 tokens"));
    }
    let out = model.forward_with(
        token_ids,
        &ForwardOptions {
            hooks,
            anchor,
            logit_rows: LogitRows::All,
            ..Default::default()
        },
    )?;
    let vocab = model.vocab_size();
    let mut nll = 0.0f64;
    for i in 0..token_ids.len() - 1 {
        let row = out.row(i, vocab);
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let log_z = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        nll += log_z - row[token_ids[i + 1] as usize] as f64;
    }
    Ok((nll / (token_ids.len() - 1) as f64).exp())
}

/// Share of prompts whose chosen candidate differs between `pre` and `post`.
pub fn flip_rate(pre: &[BiasMeasurement], post: &[BiasMeasurement]) -> Result<f64> {
    if pre.len() != post.len() {
        return Err(Error::invalid(format!(
            "flip rate over {} pre and {} post measurements",
            pre.len(),
            post.len()
        )));
    }
    if pre.is_empty() {
        return Err(Error::invalid("flip rate of an empty set"));
    }
    let flips = pre.iter().zip(post).filter(|(a, b)| a.chosen != b.chosen).count();
    Ok(flips as f64 / pre.len() as f64)
}
