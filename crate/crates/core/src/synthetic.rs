//! Constructed models and tokenizers with known behavior, for tests,
//! benchmarks and demos.
//!
//! Features live in paired dimensions `(2f, 2f + 1)` holding `(+v, -v)`, so
//! every embedding has zero mean and layer norm only rescales it.

use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ComparativePrompt, Source};
use crate::error::Result;
use crate::model::math::layer_norm;
use crate::model::{LayerWeights, ModelConfig, ModelWeights, PositionEncoding, Transformer};
use crate::tokenizer::{byte_symbol, BpeTokenizer};

fn zero_weights(config: &ModelConfig) -> ModelWeights {
    let d = config.d_model;
    ModelWeights {
        token_embedding: vec![0.0; config.vocab_size * d],
        position_embedding: vec![0.0; config.max_context * d],
        layers: (0..config.n_layers).map(|_| LayerWeights::zeros(config)).collect(),
        final_ln_gain: vec![1.0; d],
        final_ln_bias: vec![0.0; d],
        unembedding: None,
    }
}

pub fn tiny_config(n_layers: usize, n_heads: usize, d_model: usize, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_heads,
        d_model,
        vocab_size,
        max_context: 64,
        layernorm_epsilon: 1e-5,
        mlp_hidden: 4 * d_model,
        position_encoding: PositionEncoding::LearnedAbsolute,
    }
}

fn fill(rng: &mut ChaCha8Rng, v: &mut [f32], scale: f32) {
    for x in v {
        *x = rng.random_range(-scale..scale);
    }
}

/// Every parameter drawn uniformly from `[-scale, scale)`, layer-norm gains
/// around 1, and an untied unembedding when `untied` is set.
pub fn random_model(config: &ModelConfig, seed: u64, scale: f32, untied: bool) -> Result<Transformer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = zero_weights(config);
    fill(&mut rng, &mut w.token_embedding, scale);
    fill(&mut rng, &mut w.position_embedding, scale);
    for lw in &mut w.layers {
        for v in [
            &mut lw.qkv_weight,
            &mut lw.qkv_bias,
            &mut lw.attn_out_weight,
            &mut lw.attn_out_bias,
            &mut lw.ln1_bias,
            &mut lw.ln2_bias,
            &mut lw.fc_weight,
            &mut lw.fc_bias,
            &mut lw.mlp_out_weight,
            &mut lw.mlp_out_bias,
        ] {
            fill(&mut rng, v, scale);
        }
        for g in lw.ln1_gain.iter_mut().chain(lw.ln2_gain.iter_mut()) {
            *g = 1.0 + rng.random_range(-0.2..0.2);
        }
    }
    for g in &mut w.final_ln_gain {
        *g = 1.0 + rng.random_range(-0.2..0.2);
    }
    fill(&mut rng, &mut w.final_ln_bias, scale);
    if untied {
        let mut u = vec![0.0; config.vocab_size * config.d_model];
        fill(&mut rng, &mut u, scale);
        w.unembedding = Some(u);
    }
    Transformer::new(config.clone(), w)
}

/// All-zero weights: every next-token distribution is uniform.
pub fn uniform_model(config: &ModelConfig) -> Result<Transformer> {
    Transformer::new(config.clone(), zero_weights(config))
}

/// A model whose greedy continuation of `sequence[0]` reproduces `sequence`
/// with near-certainty. Tokens before the last must be distinct.
pub fn successor_model(sequence: &[u32], vocab_size: usize) -> Result<Transformer> {
    let n = sequence.len();
    let d = (2 * n).max(4);
    let mut config = tiny_config(1, 1, d, vocab_size);
    config.max_context = n.max(2);
    let mut w = zero_weights(&config);
    let mut unembed = vec![0.0f32; vocab_size * d];
    let alpha = 30.0 / (2.0 * d as f32).sqrt();
    for (i, &t) in sequence.iter().enumerate() {
        let e = &mut w.token_embedding[t as usize * d..(t as usize + 1) * d];
        e[2 * i] = 1.0;
        e[2 * i + 1] = -1.0;
        if let Some(&next) = sequence.get(i + 1) {
            let row = &mut unembed[next as usize * d..(next as usize + 1) * d];
            row[2 * i] = alpha;
            row[2 * i + 1] = -alpha;
        }
    }
    w.unembedding = Some(unembed);
    Transformer::new(config, w)
}

/// Byte-level BPE whose vocabulary holds the 256 byte symbols followed by
/// chain merges that make each `" " + word` a single token.
pub fn word_tokenizer(words: &[&str]) -> Result<BpeTokenizer> {
    let mut encoder: HashMap<String, u32> = HashMap::new();
    for b in 0..=255u8 {
        encoder.insert(byte_symbol(b).to_string(), b as u32);
    }
    let mut merges: Vec<(String, String)> = Vec::new();
    for word in words {
        let symbols: Vec<String> = format!(" {word}")
            .bytes()
            .map(|b| byte_symbol(b).to_string())
            .collect();
        let mut acc = symbols[0].clone();
        for s in &symbols[1..] {
            let pair = (acc.clone(), s.clone());
            acc.push_str(s);
            if !encoder.contains_key(&acc) {
                encoder.insert(acc.clone(), encoder.len() as u32);
                merges.push(pair);
            }
        }
    }
    BpeTokenizer::from_parts(encoder, &merges)
}

const FEATURE_QUERY: usize = 0;
const FEATURE_ATTRACT: usize = 1;
const FEATURE_WEAK: usize = 2;
const FEATURE_ID_FAVORED: usize = 3;
const FEATURE_ID_OTHER: usize = 4;
const FIRST_NOISE_DIM: usize = 10;

const CANDIDATE_WORDS: [&str; 12] = [
    "grandson",
    "grandfather",
    "nurse",
    "surgeon",
    "tenant",
    "landlord",
    "pilot",
    "cashier",
    "student",
    "teacher",
    "banker",
    "farmer",
];

const FILLER_WORDS: [&str; 24] = [
    "the", "a", "saw", "met", "their", "last", "week", "outside", "store", "trying", "to", "book",
    "cab", "near", "phone", "was", "not", "sure", "using", "with", "old", "new", "quietly", "then",
];

/// Parameters of a planted-bias model.
#[derive(Debug, Clone)]
pub struct PlantedSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub planted_layer: usize,
    pub seed: u64,
    /// Pre-scale attention logit from `?` to the favored candidate.
    pub attract_score: f32,
    /// Same, toward the other candidate.
    pub weak_score: f32,
    /// Logit gain on the copied candidate identity.
    pub identity_gain: f32,
    /// Scale of the random parameters in unplanted layers.
    pub noise: f32,
}

impl PlantedSpec {
    pub fn new(n_layers: usize, n_heads: usize, planted_layer: usize, seed: u64) -> Self {
        PlantedSpec {
            n_layers,
            n_heads,
            planted_layer,
            seed,
            attract_score: 6.0,
            weak_score: 3.0,
            identity_gain: 0.25,
            noise: 0.02,
        }
    }
}

/// A small model where one layer's attention from the final `?` token
/// concentrates on the favored candidate and copies its identity into the
/// output, making that candidate the more probable answer.
#[derive(Debug, Clone)]
pub struct PlantedFixture {
    pub model: Transformer,
    pub tokenizer: BpeTokenizer,
    pub planted_layer: usize,
    pub favored: String,
    pub other: String,
    seed: u64,
}

fn set_pair(v: &mut [f32], feature: usize, value: f32) {
    v[2 * feature] = value;
    v[2 * feature + 1] = -value;
}

impl PlantedFixture {
    pub const D_MODEL: usize = 48;

    pub fn build(spec: &PlantedSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let pair: Vec<&str> = CANDIDATE_WORDS.choose_multiple(&mut rng, 2).copied().collect();
        let (favored, other) = (pair[0].to_string(), pair[1].to_string());
        let mut words: Vec<&str> = vec!["Who", "or", "and"];
        words.extend(FILLER_WORDS);
        words.extend(CANDIDATE_WORDS);
        let tokenizer = word_tokenizer(&words)?;

        let d = Self::D_MODEL;
        let mut config = tiny_config(spec.n_layers, spec.n_heads, d, tokenizer.vocab_size());
        config.max_context = 96;
        let hd = config.head_dim();
        let mut w = zero_weights(&config);

        let fav_id = tokenizer.first_token_id(&favored)? as usize;
        let oth_id = tokenizer.first_token_id(&other)? as usize;
        let q_id = tokenizer.token_id("?").expect("byte symbol") as usize;
        for t in 0..config.vocab_size {
            let e = &mut w.token_embedding[t * d..(t + 1) * d];
            if t == q_id {
                set_pair(e, FEATURE_QUERY, 3.0);
            } else if t == fav_id {
                set_pair(e, FEATURE_ATTRACT, 1.5);
                set_pair(e, FEATURE_ID_FAVORED, 1.5);
            } else if t == oth_id {
                set_pair(e, FEATURE_WEAK, 1.5);
                set_pair(e, FEATURE_ID_OTHER, 1.5);
            } else {
                fill(&mut rng, &mut e[FIRST_NOISE_DIM..], 1.0);
            }
        }
        fill(&mut rng, &mut w.position_embedding, 0.05);

        for (l, lw) in w.layers.iter_mut().enumerate() {
            if l == spec.planted_layer {
                continue;
            }
            for v in [
                &mut lw.qkv_weight,
                &mut lw.attn_out_weight,
                &mut lw.fc_weight,
                &mut lw.mlp_out_weight,
            ] {
                fill(&mut rng, v, spec.noise);
            }
        }

        // Size the query/key gain from the normalized embeddings so the
        // attention logit toward the favored token is `attract_score`.
        let ln = |t: usize| {
            let mut out = vec![0.0f32; d];
            let g = vec![1.0f32; d];
            let b = vec![0.0f32; d];
            layer_norm(&w.token_embedding[t * d..(t + 1) * d], &g, &b, config.layernorm_epsilon, &mut out);
            out
        };
        let diff = |v: &[f32], f: usize| v[2 * f] - v[2 * f + 1];
        let q_val = diff(&ln(q_id), FEATURE_QUERY);
        let k_val = diff(&ln(fav_id), FEATURE_ATTRACT);
        let gain = (spec.attract_score * (hd as f32).sqrt() / (q_val * k_val)).sqrt();
        let weak_ratio = spec.weak_score / spec.attract_score;

        let lw = &mut w.layers[spec.planted_layer];
        let cols = 3 * d;
        for h in 0..spec.n_heads {
            let qc = h * hd;
            let kc = d + h * hd;
            lw.qkv_weight[2 * FEATURE_QUERY * cols + qc] = gain;
            lw.qkv_weight[(2 * FEATURE_QUERY + 1) * cols + qc] = -gain;
            lw.qkv_weight[2 * FEATURE_ATTRACT * cols + kc] = gain;
            lw.qkv_weight[(2 * FEATURE_ATTRACT + 1) * cols + kc] = -gain;
            lw.qkv_weight[2 * FEATURE_WEAK * cols + kc] = gain * weak_ratio;
            lw.qkv_weight[(2 * FEATURE_WEAK + 1) * cols + kc] = -gain * weak_ratio;
        }
        // Head 0 copies both identities into the residual stream.
        for (slot, f) in [FEATURE_ID_FAVORED, FEATURE_ID_OTHER].into_iter().enumerate() {
            lw.qkv_weight[2 * f * cols + 2 * d + slot] = 1.0;
            lw.qkv_weight[(2 * f + 1) * cols + 2 * d + slot] = -1.0;
            lw.attn_out_weight[slot * d + 2 * f] = 0.5;
            lw.attn_out_weight[slot * d + 2 * f + 1] = -0.5;
        }

        // Candidates share a prior from the query feature; the copied
        // identity separates them.
        let mut unembed = vec![0.0f32; config.vocab_size * d];
        for (t, f) in [(fav_id, FEATURE_ID_FAVORED), (oth_id, FEATURE_ID_OTHER)] {
            let row = &mut unembed[t * d..(t + 1) * d];
            set_pair(row, FEATURE_QUERY, 0.5);
            set_pair(row, f, spec.identity_gain);
        }
        w.unembedding = Some(unembed);

        Ok(PlantedFixture {
            model: Transformer::new(config, w)?,
            tokenizer,
            planted_layer: spec.planted_layer,
            favored,
            other,
            seed: spec.seed,
        })
    }

    /// Comparative prompts mentioning both candidates, ending in `?`.
    /// Candidate order and filler vary with the prompt index.
    pub fn prompts(&self, n: usize) -> Vec<ComparativePrompt> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0f_9a11);
        let fillers = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| -> String {
            let count = rng.random_range(lo..=hi);
            (0..count)
                .map(|_| format!(" {}", FILLER_WORDS.choose(rng).expect("non-empty")))
                .collect()
        };
        (0..n)
            .map(|i| {
                let swap = rng.random_bool(0.5);
                let (first, second) = if swap {
                    (&self.other, &self.favored)
                } else {
                    (&self.favored, &self.other)
                };
                let context = format!(
                    "The{} {first}{} and the {second}{}.",
                    fillers(&mut rng, 1, 5),
                    fillers(&mut rng, 1, 4),
                    fillers(&mut rng, 0, 3)
                );
                let question = if rng.random_bool(0.3) {
                    format!("Who{}, {first} or {second}?", fillers(&mut rng, 1, 2))
                } else {
                    format!("Who{}?", fillers(&mut rng, 2, 4))
                };
                let (c1, c2) = if rng.random_bool(0.5) {
                    (first.clone(), second.clone())
                } else {
                    (second.clone(), first.clone())
                };
                ComparativePrompt {
                    id: format!("planted-{}-{i}", self.seed),
                    context,
                    question,
                    candidate_1: c1,
                    candidate_2: c2,
                    bias_category: "planted".into(),
                    source: Source::Custom,
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_tokenizer_makes_single_tokens() {
        let tok = word_tokenizer(&["grandfather", "the"]).unwrap();
        let enc = tok.encode("I saw the grandfather?").unwrap();
        let pieces: Vec<&str> = enc.offsets.iter().map(|&(s, e)| &enc.text[s..e]).collect();
        assert_eq!(pieces, vec!["I", " ", "s", "a", "w", " the", " grandfather", "?"]);
        assert_eq!(tok.decode(&enc.token_ids).unwrap(), enc.text);
    }

    #[test]
    fn uniform_model_is_uniform() {
        let m = uniform_model(&tiny_config(2, 2, 8, 32)).unwrap();
        let p = m.next_token_distribution(&[1, 5, 7], None).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 32.0).abs() < 1e-12));
    }

    #[test]
    fn successor_model_follows_sequence() {
        let seq = [4u32, 9, 2, 17, 3];
        let m = successor_model(&seq, 20).unwrap();
        let g = m.decode_greedy(&seq[..1], None, 4).unwrap();
        assert_eq!(g.tokens, &seq[1..]);
    }

    #[test]
    fn planted_prompts_are_valid() {
        let f = PlantedFixture::build(&PlantedSpec::new(3, 2, 1, 4)).unwrap();
        for p in f.prompts(20) {
            p.validate().unwrap();
            assert!(p.text().ends_with('?'));
            assert!(p.candidates().contains(&f.favored.as_str()));
        }
    }
}
