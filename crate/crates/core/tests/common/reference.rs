//! Straight-line f64 forward pass written directly from the GPT-2 equations.
//! It shares no code with the engine and serves as its oracle.

use biasscope_core::{ModelConfig, ModelWeights};

/// One post-softmax scaling: `(layer, targets, lambda)`, applied to the last
/// row of every head in `layer`.
pub type RefHook = (usize, Vec<usize>, f64);

pub struct RefOutput {
    /// `[position][vocab]`
    pub logits: Vec<Vec<f64>>,
    /// Last-row attention, `[layer][head][key]`.
    pub last_attention: Vec<Vec<Vec<f64>>>,
}

fn layer_norm(x: &[f64], g: &[f32], b: &[f32], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(g)
        .zip(b)
        .map(|((v, g), b)| (v - mean) * inv * *g as f64 + *b as f64)
        .collect()
}

/// `x` (len `rows`) times a row-major `[rows, cols]` matrix plus bias.
fn affine(x: &[f64], w: &[f32], b: &[f32], cols: usize) -> Vec<f64> {
    let mut out: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    for (r, xv) in x.iter().enumerate() {
        for c in 0..cols {
            out[c] += xv * w[r * cols + c] as f64;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn reference_forward(cfg: &ModelConfig, w: &ModelWeights, tokens: &[u32], hooks: &[RefHook]) -> RefOutput {
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let hd = d / nh;
    let t_len = tokens.len();
    let eps = cfg.layernorm_epsilon as f64;

    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            (0..d)
                .map(|c| w.token_embedding[t as usize * d + c] as f64 + w.position_embedding[i * d + c] as f64)
                .collect()
        })
        .collect();

    let mut last_attention = Vec::new();
    for (l, lw) in w.layers.iter().enumerate() {
        let qkv: Vec<Vec<f64>> = x
            .iter()
            .map(|xi| affine(&layer_norm(xi, &lw.ln1_gain, &lw.ln1_bias, eps), &lw.qkv_weight, &lw.qkv_bias, 3 * d))
            .collect();
        let mut heads_out = vec![vec![0.0f64; d]; t_len];
        let mut layer_rows = Vec::new();
        for h in 0..nh {
            for i in 0..t_len {
                let q = &qkv[i][h * hd..(h + 1) * hd];
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let k = &qkv[j][d + h * hd..d + (h + 1) * hd];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut a: Vec<f64> = exps.iter().map(|e| e / z).collect();
                if i == t_len - 1 {
                    for (hl, targets, lambda) in hooks {
                        if *hl == l {
                            for &j in targets {
                                a[j] *= lambda;
                            }
                        }
                    }
                    layer_rows.push(a.clone());
                }
                for (j, aj) in a.iter().enumerate() {
                    for c in 0..hd {
                        heads_out[i][h * hd + c] += aj * qkv[j][2 * d + h * hd + c];
                    }
                }
            }
        }
        last_attention.push(layer_rows);
        for i in 0..t_len {
            let proj = affine(&heads_out[i], &lw.attn_out_weight, &lw.attn_out_bias, d);
            for c in 0..d {
                x[i][c] += proj[c];
            }
            let h2 = layer_norm(&x[i], &lw.ln2_gain, &lw.ln2_bias, eps);
            let hidden: Vec<f64> = affine(&h2, &lw.fc_weight, &lw.fc_bias, cfg.mlp_hidden)
                .into_iter()
                .map(gelu)
                .collect();
            let m = affine(&hidden, &lw.mlp_out_weight, &lw.mlp_out_bias, d);
            for c in 0..d {
                x[i][c] += m[c];
            }
        }
    }

    let unembed = w.unembedding.as_deref().unwrap_or(&w.token_embedding);
    let logits = x
        .iter()
        .map(|xi| {
            let f = layer_norm(xi, &w.final_ln_gain, &w.final_ln_bias, eps);
            (0..cfg.vocab_size)
                .map(|v| (0..d).map(|c| f[c] * unembed[v * d + c] as f64).sum())
                .collect()
        })
        .collect();
    RefOutput { logits, last_attention }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
