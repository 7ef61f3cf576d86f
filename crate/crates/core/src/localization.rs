//! Locating the layers whose last-token attention favors a candidate.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AttentionTrace;

/// Score used to order layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    /// Attention to the favored candidate minus attention to the other one.
    Difference,
    /// Attention to the favored candidate alone.
    #[default]
    TopCandidate,
}

impl FromStr for Approach {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "difference" | "1" => Ok(Approach::Difference),
            "top_candidate" | "2" => Ok(Approach::TopCandidate),
            other => Err(Error::invalid(format!(
                "unknown approach `{other}` (expected difference or top_candidate)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSetMode {
    #[default]
    TopK,
    Top1,
    RandomK,
    MiddleK,
    BottomK,
}

impl LayerSetMode {
    pub const ALL: [LayerSetMode; 5] = [
        LayerSetMode::TopK,
        LayerSetMode::Top1,
        LayerSetMode::RandomK,
        LayerSetMode::MiddleK,
        LayerSetMode::BottomK,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerSetMode::TopK => "top_k",
            LayerSetMode::Top1 => "top_1",
            LayerSetMode::RandomK => "random_k",
            LayerSetMode::MiddleK => "middle_k",
            LayerSetMode::BottomK => "bottom_k",
        }
    }
}

impl std::fmt::Display for LayerSetMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerSetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        LayerSetMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown layer-set mode `{s}` (expected top_k, top_1, random_k, middle_k, bottom_k)"
                ))
            })
    }
}

/// Head-averaged attention from the last prompt token to `first_token_index`,
/// one value per layer.
pub fn mean_layer_attention(trace: &AttentionTrace, first_token_index: usize) -> Result<Vec<f64>> {
    if first_token_index >= trace.prompt_length() {
        return Err(Error::invalid(format!(
            "token index {first_token_index} outside prompt of {} tokens",
            trace.prompt_length()
        )));
    }
    let heads = trace.n_heads() as f64;
    Ok((0..trace.n_layers())
        .map(|l| {
            (0..trace.n_heads())
                .map(|h| trace.get(l, h, first_token_index) as f64)
                .sum::<f64>()
                / heads
        })
        .collect())
}

/// Orders layers by descending score; equal scores keep the lower layer first.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let key = |i: usize| if scores[i].is_nan() { f64::NEG_INFINITY } else { scores[i] };
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    order
}

/// Full layer ordering under `approach`, given the per-layer attention to
/// the favored and the other candidate.
pub fn rank_layers(favored: &[f64], other: &[f64], approach: Approach) -> Vec<usize> {
    match approach {
        Approach::TopCandidate => rank_by_score(favored),
        Approach::Difference => {
            let diff: Vec<f64> = favored.iter().zip(other).map(|(a, b)| a - b).collect();
            rank_by_score(&diff)
        }
    }
}

/// Per-layer attention to both candidates and the resulting ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBiasProfile {
    /// Head-averaged attention to each candidate's first token.
    pub attention: [Vec<f64>; 2],
    /// Candidate treated as favored (1 or 2).
    pub favored: u8,
    /// Favored minus other, per layer.
    pub difference: Vec<f64>,
    pub approach: Approach,
    pub ranking: Vec<usize>,
}

impl LayerBiasProfile {
    pub fn from_trace(
        trace: &AttentionTrace,
        first_token_indices: [usize; 2],
        favored: u8,
        approach: Approach,
    ) -> Result<Self> {
        let a1 = mean_layer_attention(trace, first_token_indices[0])?;
        let a2 = mean_layer_attention(trace, first_token_indices[1])?;
        let (fav, oth) = if favored == 2 { (&a2, &a1) } else { (&a1, &a2) };
        let difference = fav.iter().zip(oth).map(|(a, b)| a - b).collect();
        let ranking = rank_layers(fav, oth, approach);
        Ok(LayerBiasProfile {
            attention: [a1, a2],
            favored,
            difference,
            approach,
            ranking,
        })
    }

    pub fn favored_attention(&self) -> &[f64] {
        &self.attention[(self.favored == 2) as usize]
    }

    pub fn other_attention(&self) -> &[f64] {
        &self.attention[(self.favored != 2) as usize]
    }

    pub fn ranking_for(&self, approach: Approach) -> Vec<usize> {
        rank_layers(self.favored_attention(), self.other_attention(), approach)
    }
}

/// Picks the layers to edit from a full ranking.
///
/// The result is ordered by ranking position. `random_k` draws `k` distinct
/// layers uniformly with a ChaCha generator seeded by `seed`.
pub fn select_layer_set(ranking: &[usize], mode: LayerSetMode, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = ranking.len();
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::Config(format!("k = {k} exceeds the {n} available layers")));
    }
    Ok(match mode {
        LayerSetMode::TopK => ranking[..k].to_vec(),
        LayerSetMode::Top1 => ranking[..1].to_vec(),
        LayerSetMode::BottomK => ranking[n - k..].to_vec(),
        LayerSetMode::MiddleK => {
            let start = (n / 2).saturating_sub(k / 2).min(n - k);
            ranking[start..start + k].to_vec()
        }
        LayerSetMode::RandomK => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|p| ranking[p]).collect()
        }
    })
}
