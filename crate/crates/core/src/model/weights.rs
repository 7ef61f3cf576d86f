//! GPT-2 family weights and the tensor naming map.
//!
//! | tensor                         | shape              |
//! |--------------------------------|--------------------|
//! | `wte.weight`                   | `[vocab, d]`       |
//! | `wpe.weight`                   | `[max_context, d]` |
//! | `h.{i}.ln_1.weight` / `.bias`  | `[d]`              |
//! | `h.{i}.attn.c_attn.weight`     | `[d, 3d]` (q, k, v column blocks) |
//! | `h.{i}.attn.c_attn.bias`       | `[3d]`             |
//! | `h.{i}.attn.c_proj.weight`     | `[d, d]`           |
//! | `h.{i}.attn.c_proj.bias`       | `[d]`              |
//! | `h.{i}.ln_2.weight` / `.bias`  | `[d]`              |
//! | `h.{i}.mlp.c_fc.weight`        | `[d, mlp]`         |
//! | `h.{i}.mlp.c_fc.bias`          | `[mlp]`            |
//! | `h.{i}.mlp.c_proj.weight`      | `[mlp, d]`         |
//! | `h.{i}.mlp.c_proj.bias`        | `[d]`              |
//! | `ln_f.weight` / `.bias`        | `[d]`              |
//! | `lm_head.weight` (optional)    | `[vocab, d]`       |
//!
//! Projection matrices use the GPT-2 `Conv1D` orientation, `y = x W + b`.
//! Names may carry a `transformer.` prefix. Without `lm_head.weight` the
//! unembedding is tied to `wte.weight`.

use std::path::Path;

use super::config::ModelConfig;
use super::container::{Tensor, TensorStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub qkv_weight: Vec<f32>,
    pub qkv_bias: Vec<f32>,
    pub attn_out_weight: Vec<f32>,
    pub attn_out_bias: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    pub fc_weight: Vec<f32>,
    pub fc_bias: Vec<f32>,
    pub mlp_out_weight: Vec<f32>,
    pub mlp_out_bias: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub token_embedding: Vec<f32>,
    pub position_embedding: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gain: Vec<f32>,
    pub final_ln_bias: Vec<f32>,
    /// Untied unembedding in `[vocab, d]` layout; `None` means tied to
    /// `token_embedding`.
    pub unembedding: Option<Vec<f32>>,
}

impl LayerWeights {
    /// All-zero layer with unit layer-norm gains.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let f = config.mlp_hidden;
        LayerWeights {
            ln1_gain: vec![1.0; d],
            ln1_bias: vec![0.0; d],
            qkv_weight: vec![0.0; d * 3 * d],
            qkv_bias: vec![0.0; 3 * d],
            attn_out_weight: vec![0.0; d * d],
            attn_out_bias: vec![0.0; d],
            ln2_gain: vec![1.0; d],
            ln2_bias: vec![0.0; d],
            fc_weight: vec![0.0; d * f],
            fc_bias: vec![0.0; f],
            mlp_out_weight: vec![0.0; f * d],
            mlp_out_bias: vec![0.0; d],
        }
    }
}

fn layer_names(i: usize, config: &ModelConfig) -> [(String, Vec<usize>); 12] {
    let d = config.d_model;
    let f = config.mlp_hidden;
    [
        (format!("h.{i}.ln_1.weight"), vec![d]),
        (format!("h.{i}.ln_1.bias"), vec![d]),
        (format!("h.{i}.attn.c_attn.weight"), vec![d, 3 * d]),
        (format!("h.{i}.attn.c_attn.bias"), vec![3 * d]),
        (format!("h.{i}.attn.c_proj.weight"), vec![d, d]),
        (format!("h.{i}.attn.c_proj.bias"), vec![d]),
        (format!("h.{i}.ln_2.weight"), vec![d]),
        (format!("h.{i}.ln_2.bias"), vec![d]),
        (format!("h.{i}.mlp.c_fc.weight"), vec![d, f]),
        (format!("h.{i}.mlp.c_fc.bias"), vec![f]),
        (format!("h.{i}.mlp.c_proj.weight"), vec![f, d]),
        (format!("h.{i}.mlp.c_proj.bias"), vec![d]),
    ]
}

struct Lookup<'a> {
    store: &'a mut TensorStore,
}

impl Lookup<'_> {
    fn find(&mut self, name: &str) -> Option<Tensor> {
        self.store
            .tensors
            .remove(name)
            .or_else(|| self.store.tensors.remove(&format!("transformer.{name}")))
    }

    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let t = self
            .find(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        check(name, shape, t)
    }
}

fn check(name: &str, shape: &[usize], t: Tensor) -> Result<Vec<f32>> {
    if t.shape != shape {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            expected: shape.to_vec(),
            found: t.shape,
        });
    }
    if let Some(index) = t.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            name: name.to_string(),
            index,
        });
    }
    Ok(t.data)
}

impl ModelWeights {
    /// Builds validated weights from a tensor store, consuming the tensors it uses.
    pub fn from_store(mut store: TensorStore, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let v = config.vocab_size;
        let mut lk = Lookup { store: &mut store };
        let token_embedding = lk.take("wte.weight", &[v, d])?;
        let position_embedding = lk.take("wpe.weight", &[config.max_context, d])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let names = layer_names(i, config);
            let mut parts = Vec::with_capacity(12);
            for (name, shape) in &names {
                parts.push(lk.take(name, shape)?);
            }
            let mut it = parts.into_iter();
            let mut next = || it.next().unwrap();
            layers.push(LayerWeights {
                ln1_gain: next(),
                ln1_bias: next(),
                qkv_weight: next(),
                qkv_bias: next(),
                attn_out_weight: next(),
                attn_out_bias: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                fc_weight: next(),
                fc_bias: next(),
                mlp_out_weight: next(),
                mlp_out_bias: next(),
            });
        }
        let final_ln_gain = lk.take("ln_f.weight", &[d])?;
        let final_ln_bias = lk.take("ln_f.bias", &[d])?;
        let unembedding = match lk.find("lm_head.weight") {
            Some(t) => Some(check("lm_head.weight", &[v, d], t)?),
            None => None,
        };
        Ok(ModelWeights {
            token_embedding,
            position_embedding,
            layers,
            final_ln_gain,
            final_ln_bias,
            unembedding,
        })
    }

    /// Inverse of [`ModelWeights::from_store`], using unprefixed names.
    pub fn to_store(&self, config: &ModelConfig) -> TensorStore {
        let d = config.d_model;
        let v = config.vocab_size;
        let mut s = TensorStore::default();
        s.insert("wte.weight", vec![v, d], self.token_embedding.clone());
        s.insert("wpe.weight", vec![config.max_context, d], self.position_embedding.clone());
        for (i, l) in self.layers.iter().enumerate() {
            let data = [
                &l.ln1_gain,
                &l.ln1_bias,
                &l.qkv_weight,
                &l.qkv_bias,
                &l.attn_out_weight,
                &l.attn_out_bias,
                &l.ln2_gain,
                &l.ln2_bias,
                &l.fc_weight,
                &l.fc_bias,
                &l.mlp_out_weight,
                &l.mlp_out_bias,
            ];
            for ((name, shape), t) in layer_names(i, config).into_iter().zip(data) {
                s.insert(name, shape, t.clone());
            }
        }
        s.insert("ln_f.weight", vec![d], self.final_ln_gain.clone());
        s.insert("ln_f.bias", vec![d], self.final_ln_bias.clone());
        if let Some(u) = &self.unembedding {
            s.insert("lm_head.weight", vec![v, d], u.clone());
        }
        s
    }

    /// Unembedding rows in `[vocab, d]` layout.
    pub fn unembedding_rows(&self) -> &[f32] {
        self.unembedding.as_deref().unwrap_or(&self.token_embedding)
    }
}

/// Reads and validates a weight container against `config`.
pub fn load_model(weights_file: &Path, config: &ModelConfig) -> Result<ModelWeights> {
    let store = TensorStore::read(weights_file)?;
    ModelWeights::from_store(store, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            vocab_size: 32,
            max_context: 16,
            layernorm_epsilon: 1e-5,
            mlp_hidden: 32,
            position_encoding: Default::default(),
        }
    }

    fn zero_weights(c: &ModelConfig) -> ModelWeights {
        ModelWeights {
            token_embedding: vec![0.0; c.vocab_size * c.d_model],
            position_embedding: vec![0.0; c.max_context * c.d_model],
            layers: (0..c.n_layers).map(|_| LayerWeights::zeros(c)).collect(),
            final_ln_gain: vec![1.0; c.d_model],
            final_ln_bias: vec![0.0; c.d_model],
            unembedding: None,
        }
    }

    #[test]
    fn store_round_trip() {
        let c = tiny();
        let w = zero_weights(&c);
        let back = ModelWeights::from_store(w.to_store(&c), &c).unwrap();
        assert_eq!(back.layers.len(), 2);
        assert!(back.unembedding.is_none());
    }

    #[test]
    fn accepts_transformer_prefix() {
        let c = tiny();
        let plain = zero_weights(&c).to_store(&c);
        let mut prefixed = TensorStore::default();
        for (k, t) in plain.tensors {
            prefixed.tensors.insert(format!("transformer.{k}"), t);
        }
        ModelWeights::from_store(prefixed, &c).unwrap();
    }

    #[test]
    fn missing_tensor_is_named() {
        let c = tiny();
        let mut s = zero_weights(&c).to_store(&c);
        s.tensors.remove("h.1.attn.c_proj.weight");
        match ModelWeights::from_store(s, &c) {
            Err(Error::MissingTensor(name)) => assert_eq!(name, "h.1.attn.c_proj.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let c = tiny();
        let mut s = zero_weights(&c).to_store(&c);
        s.insert("ln_f.bias", vec![7], vec![0.0; 7]);
        match ModelWeights::from_store(s, &c) {
            Err(Error::ShapeMismatch { expected, found, .. }) => {
                assert_eq!(expected, vec![8]);
                assert_eq!(found, vec![7]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_rejected() {
        let c = tiny();
        let mut s = zero_weights(&c).to_store(&c);
        s.tensors.get_mut("h.0.mlp.c_fc.bias").unwrap().data[3] = f32::NAN;
        assert!(matches!(
            ModelWeights::from_store(s, &c),
            Err(Error::NonFinite { index: 3, .. })
        ));
    }
}
