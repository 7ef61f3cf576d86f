use std::path::Path;

use super::config::ModelConfig;
use super::hooks::InterventionHooks;
use super::math::{add_bias, argmax, gelu, layer_norm, matmul, matmul_transposed, softmax_f64, softmax_in_place};
use super::trace::AttentionTrace;
use super::weights::{load_model, ModelWeights};
use crate::error::{Error, Result};

/// Keys and values of already-processed positions, one buffer per layer.
///
/// Rows are positions; each row holds all heads side by side (`d_model` wide).
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn new(n_layers: usize) -> Self {
        KvCache {
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Which positions get logits computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogitRows {
    #[default]
    All,
    Last,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions<'a> {
    pub hooks: Option<&'a InterventionHooks>,
    pub capture_attention: bool,
    /// Absolute position of the hook anchor row `T`; defaults to the last
    /// input position. Rows after the anchor are hooked only by specs with
    /// `apply_during_generation`.
    pub anchor: Option<usize>,
    pub logit_rows: LogitRows,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Row-major `[rows × vocab]`; `rows` is the sequence length for
    /// [`LogitRows::All`], else 1.
    pub logits: Vec<f32>,
    pub trace: Option<AttentionTrace>,
}

impl ForwardOutput {
    pub fn row(&self, i: usize, vocab: usize) -> &[f32] {
        &self.logits[i * vocab..(i + 1) * vocab]
    }

    pub fn last_row(&self, vocab: usize) -> &[f32] {
        &self.logits[self.logits.len() - vocab..]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// Generation stopped early because the context window filled up.
    pub truncated: bool,
}

struct StepRequest<'a> {
    hooks: Option<&'a InterventionHooks>,
    anchor: Option<usize>,
    capture_row: Option<usize>,
    logit_rows: LogitRows,
}

/// Decoder-only transformer with GPT-2 layout. Immutable after construction;
/// all per-call state lives in a [`KvCache`] owned by the caller.
#[derive(Debug, Clone)]
pub struct Transformer {
    config: ModelConfig,
    weights: ModelWeights,
}

impl Transformer {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        check_weight_shapes(&config, &weights)?;
        Ok(Transformer { config, weights })
    }

    pub fn load(weights_file: &Path, config: ModelConfig) -> Result<Self> {
        let weights = load_model(weights_file, &config)?;
        Self::new(config, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn check_tokens(&self, tokens: &[u32], start: usize) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if start + tokens.len() > self.config.max_context {
            return Err(Error::ContextOverflow {
                len: start + tokens.len(),
                max_context: self.config.max_context,
            });
        }
        if let Some((position, &id)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &id)| id as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                id,
                position: start + position,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Full forward pass over `tokens` from an empty cache.
    pub fn forward(
        &self,
        tokens: &[u32],
        hooks: Option<&InterventionHooks>,
        capture_attention: bool,
    ) -> Result<ForwardOutput> {
        self.forward_with(
            tokens,
            &ForwardOptions {
                hooks,
                capture_attention,
                ..Default::default()
            },
        )
    }

    pub fn forward_with(&self, tokens: &[u32], opts: &ForwardOptions<'_>) -> Result<ForwardOutput> {
        self.check_tokens(tokens, 0)?;
        let anchor = opts.anchor.unwrap_or(tokens.len() - 1);
        if anchor >= tokens.len() {
            return Err(Error::invalid(format!(
                "anchor {anchor} outside sequence of {}",
                tokens.len()
            )));
        }
        if let Some(h) = opts.hooks {
            h.validate(self.config.n_layers, anchor + 1)?;
        }
        let mut cache = KvCache::new(self.config.n_layers);
        let req = StepRequest {
            hooks: opts.hooks,
            anchor: Some(anchor),
            capture_row: opts.capture_attention.then_some(tokens.len() - 1),
            logit_rows: opts.logit_rows,
        };
        self.run(&mut cache, tokens, &req)
    }

    /// Processes `tokens` without hooks and returns the filled cache.
    pub fn prefill(&self, tokens: &[u32]) -> Result<KvCache> {
        let mut cache = KvCache::new(self.config.n_layers);
        if tokens.is_empty() {
            return Ok(cache);
        }
        self.check_tokens(tokens, 0)?;
        let req = StepRequest {
            hooks: None,
            anchor: None,
            capture_row: None,
            logit_rows: LogitRows::Last,
        };
        self.run(&mut cache, tokens, &req)?;
        Ok(cache)
    }

    /// Runs `tokens` on top of an existing cache, appending to it.
    ///
    /// `anchor` is the absolute hook anchor position; when `capture_attention`
    /// is set the trace holds the row of the last processed token.
    pub fn extend(
        &self,
        cache: &mut KvCache,
        tokens: &[u32],
        hooks: Option<&InterventionHooks>,
        anchor: Option<usize>,
        capture_attention: bool,
        logit_rows: LogitRows,
    ) -> Result<ForwardOutput> {
        let start = cache.len;
        self.check_tokens(tokens, start)?;
        if let (Some(h), Some(a)) = (hooks, anchor) {
            h.validate(self.config.n_layers, a + 1)?;
        }
        let req = StepRequest {
            hooks,
            anchor,
            capture_row: capture_attention.then_some(start + tokens.len() - 1),
            logit_rows,
        };
        self.run(cache, tokens, &req)
    }

    /// Softmax of the last position's logits.
    pub fn next_token_distribution(
        &self,
        tokens: &[u32],
        hooks: Option<&InterventionHooks>,
    ) -> Result<Vec<f64>> {
        let out = self.forward_with(
            tokens,
            &ForwardOptions {
                hooks,
                logit_rows: LogitRows::Last,
                ..Default::default()
            },
        )?;
        Ok(softmax_f64(out.last_row(self.config.vocab_size)))
    }

    /// Greedy argmax continuation using the KV cache.
    pub fn decode_greedy(
        &self,
        prompt: &[u32],
        hooks: Option<&InterventionHooks>,
        max_new_tokens: usize,
    ) -> Result<Generation> {
        self.decode_greedy_with(prompt, hooks, max_new_tokens, true)
    }

    /// Greedy decoding; with `use_kv_cache = false` every step recomputes the
    /// whole sequence (reference path for cache consistency checks).
    pub fn decode_greedy_with(
        &self,
        prompt: &[u32],
        hooks: Option<&InterventionHooks>,
        max_new_tokens: usize,
        use_kv_cache: bool,
    ) -> Result<Generation> {
        self.check_tokens(prompt, 0)?;
        let anchor = prompt.len() - 1;
        if let Some(h) = hooks {
            h.validate(self.config.n_layers, prompt.len())?;
        }
        let vocab = self.config.vocab_size;
        let mut tokens = Vec::with_capacity(max_new_tokens);
        let mut truncated = false;
        if max_new_tokens == 0 {
            return Ok(Generation { tokens, truncated });
        }

        if use_kv_cache {
            let mut cache = KvCache::new(self.config.n_layers);
            let mut logits = self
                .extend(&mut cache, prompt, hooks, Some(anchor), false, LogitRows::Last)?
                .logits;
            loop {
                let next = argmax(&logits[logits.len() - vocab..]) as u32;
                tokens.push(next);
                if tokens.len() == max_new_tokens {
                    break;
                }
                if cache.len + 1 > self.config.max_context {
                    truncated = true;
                    break;
                }
                logits = self
                    .extend(&mut cache, &[next], hooks, Some(anchor), false, LogitRows::Last)?
                    .logits;
            }
        } else {
            let mut seq = prompt.to_vec();
            loop {
                let out = self.forward_with(
                    &seq,
                    &ForwardOptions {
                        hooks,
                        anchor: Some(anchor),
                        logit_rows: LogitRows::Last,
                        ..Default::default()
                    },
                )?;
                let next = argmax(out.last_row(vocab)) as u32;
                tokens.push(next);
                if tokens.len() == max_new_tokens {
                    break;
                }
                if seq.len() + 1 > self.config.max_context {
                    truncated = true;
                    break;
                }
                seq.push(next);
            }
        }
        Ok(Generation { tokens, truncated })
    }

    fn run(&self, cache: &mut KvCache, tokens: &[u32], req: &StepRequest<'_>) -> Result<ForwardOutput> {
        let c = &self.config;
        let w = &self.weights;
        let d = c.d_model;
        let n = tokens.len();
        let start = cache.len;
        let n_heads = c.n_heads;
        let hd = c.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();

        let mut x = vec![0.0f32; n * d];
        for (i, &t) in tokens.iter().enumerate() {
            let te = &w.token_embedding[t as usize * d..(t as usize + 1) * d];
            let pe = &w.position_embedding[(start + i) * d..(start + i + 1) * d];
            for ((o, a), b) in x[i * d..(i + 1) * d].iter_mut().zip(te).zip(pe) {
                *o = a + b;
            }
        }

        let mut trace = req
            .capture_row
            .map(|row| AttentionTrace::zeros(c.n_layers, n_heads, row + 1));

        let mut h = vec![0.0f32; n * d];
        let mut qkv = vec![0.0f32; n * 3 * d];
        let mut attn = vec![0.0f32; n * d];
        let mut proj = vec![0.0f32; n * d];
        let mut ff = vec![0.0f32; n * c.mlp_hidden];
        let total = start + n;
        let mut scores = vec![0.0f32; total];

        for (l, lw) in w.layers.iter().enumerate() {
            layer_norm(&x, &lw.ln1_gain, &lw.ln1_bias, c.layernorm_epsilon, &mut h);
            matmul(&h, &lw.qkv_weight, &mut qkv, n, d, 3 * d);
            add_bias(&mut qkv, &lw.qkv_bias);

            let keys = &mut cache.keys[l];
            let values = &mut cache.values[l];
            keys.truncate(start * d);
            values.truncate(start * d);
            for i in 0..n {
                let row = &qkv[i * 3 * d..(i + 1) * 3 * d];
                keys.extend_from_slice(&row[d..2 * d]);
                values.extend_from_slice(&row[2 * d..]);
            }

            let hooks_here = req.hooks.filter(|hk| hk.touches_layer(l));
            attn.fill(0.0);
            for i in 0..n {
                let pos = start + i;
                let q_row = &qkv[i * 3 * d..i * 3 * d + d];
                for head in 0..n_heads {
                    let q = &q_row[head * hd..(head + 1) * hd];
                    let row = &mut scores[..=pos];
                    for (j, s) in row.iter_mut().enumerate() {
                        let k = &keys[j * d + head * hd..j * d + (head + 1) * hd];
                        *s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
                    }
                    softmax_in_place(row);
                    if let (Some(hk), Some(anchor)) = (hooks_here, req.anchor) {
                        apply_hooks(hk, l, pos, anchor, row);
                    }
                    if req.capture_row == Some(pos) {
                        if let Some(t) = trace.as_mut() {
                            t.row_mut(l, head).copy_from_slice(row);
                        }
                    }
                    let out = &mut attn[i * d + head * hd..i * d + (head + 1) * hd];
                    for (j, &a) in row.iter().enumerate() {
                        let v = &values[j * d + head * hd..j * d + (head + 1) * hd];
                        for (o, vv) in out.iter_mut().zip(v) {
                            *o += a * vv;
                        }
                    }
                }
            }
            matmul(&attn, &lw.attn_out_weight, &mut proj, n, d, d);
            add_bias(&mut proj, &lw.attn_out_bias);
            for (xv, p) in x.iter_mut().zip(&proj) {
                *xv += p;
            }

            layer_norm(&x, &lw.ln2_gain, &lw.ln2_bias, c.layernorm_epsilon, &mut h);
            matmul(&h, &lw.fc_weight, &mut ff, n, d, c.mlp_hidden);
            add_bias(&mut ff, &lw.fc_bias);
            for v in ff.iter_mut() {
                *v = gelu(*v);
            }
            matmul(&ff, &lw.mlp_out_weight, &mut proj, n, c.mlp_hidden, d);
            add_bias(&mut proj, &lw.mlp_out_bias);
            for (xv, p) in x.iter_mut().zip(&proj) {
                *xv += p;
            }
        }
        cache.len = total;

        let first_row = match req.logit_rows {
            LogitRows::All => 0,
            LogitRows::Last => n - 1,
        };
        let rows = n - first_row;
        let mut normed = vec![0.0f32; rows * d];
        layer_norm(
            &x[first_row * d..],
            &w.final_ln_gain,
            &w.final_ln_bias,
            c.layernorm_epsilon,
            &mut normed,
        );
        let mut logits = vec![0.0f32; rows * c.vocab_size];
        matmul_transposed(&normed, w.unembedding_rows(), &mut logits, rows, d, c.vocab_size);
        Ok(ForwardOutput { logits, trace })
    }
}

/// Scales one attention row in place according to the hooks of `layer`.
fn apply_hooks(hooks: &InterventionHooks, layer: usize, pos: usize, anchor: usize, row: &mut [f32]) {
    let mut touched = false;
    for spec in hooks.for_layer(layer) {
        let active = pos == anchor || (pos > anchor && spec.apply_during_generation);
        if !active {
            continue;
        }
        for &j in &spec.target_indices {
            if j < row.len() {
                row[j] *= spec.lambda;
                touched = true;
            }
        }
    }
    if touched && hooks.renormalize_row {
        let sum: f32 = row.iter().sum();
        if sum > 0.0 {
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
    }
}

fn check_weight_shapes(c: &ModelConfig, w: &ModelWeights) -> Result<()> {
    let d = c.d_model;
    let f = c.mlp_hidden;
    let want = |name: &str, len: usize, expected: Vec<usize>| -> Result<()> {
        if len != expected.iter().product::<usize>() {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected,
                found: vec![len],
            });
        }
        Ok(())
    };
    want("wte.weight", w.token_embedding.len(), vec![c.vocab_size, d])?;
    want("wpe.weight", w.position_embedding.len(), vec![c.max_context, d])?;
    if w.layers.len() != c.n_layers {
        return Err(Error::Config(format!(
            "weights have {} layers, config says {}",
            w.layers.len(),
            c.n_layers
        )));
    }
    for (i, l) in w.layers.iter().enumerate() {
        let p = |s: &str| format!("h.{i}.{s}");
        want(&p("ln_1.weight"), l.ln1_gain.len(), vec![d])?;
        want(&p("ln_1.bias"), l.ln1_bias.len(), vec![d])?;
        want(&p("attn.c_attn.weight"), l.qkv_weight.len(), vec![d, 3 * d])?;
        want(&p("attn.c_attn.bias"), l.qkv_bias.len(), vec![3 * d])?;
        want(&p("attn.c_proj.weight"), l.attn_out_weight.len(), vec![d, d])?;
        want(&p("attn.c_proj.bias"), l.attn_out_bias.len(), vec![d])?;
        want(&p("ln_2.weight"), l.ln2_gain.len(), vec![d])?;
        want(&p("ln_2.bias"), l.ln2_bias.len(), vec![d])?;
        want(&p("mlp.c_fc.weight"), l.fc_weight.len(), vec![d, f])?;
        want(&p("mlp.c_fc.bias"), l.fc_bias.len(), vec![f])?;
        want(&p("mlp.c_proj.weight"), l.mlp_out_weight.len(), vec![f, d])?;
        want(&p("mlp.c_proj.bias"), l.mlp_out_bias.len(), vec![d])?;
    }
    want("ln_f.weight", w.final_ln_gain.len(), vec![d])?;
    want("ln_f.bias", w.final_ln_bias.len(), vec![d])?;
    if let Some(u) = &w.unembedding {
        want("lm_head.weight", u.len(), vec![c.vocab_size, d])?;
    }
    Ok(())
}
