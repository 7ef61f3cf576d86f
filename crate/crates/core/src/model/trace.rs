use serde::{Deserialize, Serialize};

/// Attention row of the last prompt token, for every layer and head.
///
/// `get(l, h, j)` is the post-softmax weight from query position `T` (the
/// last token) to key position `j`, after any scaling hooks on that layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    n_layers: usize,
    n_heads: usize,
    prompt_length: usize,
    scores: Vec<f32>,
}

impl AttentionTrace {
    pub fn zeros(n_layers: usize, n_heads: usize, prompt_length: usize) -> Self {
        AttentionTrace {
            n_layers,
            n_heads,
            prompt_length,
            scores: vec![0.0; n_layers * n_heads * prompt_length],
        }
    }

    /// Builds a trace from nested `[layer][head][position]` rows.
    pub fn from_rows(rows: &[Vec<Vec<f32>>]) -> Self {
        let n_layers = rows.len();
        let n_heads = rows.first().map_or(0, |l| l.len());
        let prompt_length = rows
            .first()
            .and_then(|l| l.first())
            .map_or(0, |h| h.len());
        let mut t = Self::zeros(n_layers, n_heads, prompt_length);
        for (l, layer) in rows.iter().enumerate() {
            assert_eq!(layer.len(), n_heads, "ragged heads");
            for (h, row) in layer.iter().enumerate() {
                assert_eq!(row.len(), prompt_length, "ragged rows");
                t.row_mut(l, h).copy_from_slice(row);
            }
        }
        t
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn prompt_length(&self) -> usize {
        self.prompt_length
    }

    pub fn get(&self, layer: usize, head: usize, position: usize) -> f32 {
        self.row(layer, head)[position]
    }

    pub fn row(&self, layer: usize, head: usize) -> &[f32] {
        let start = (layer * self.n_heads + head) * self.prompt_length;
        &self.scores[start..start + self.prompt_length]
    }

    pub(crate) fn row_mut(&mut self, layer: usize, head: usize) -> &mut [f32] {
        let start = (layer * self.n_heads + head) * self.prompt_length;
        &mut self.scores[start..start + self.prompt_length]
    }

    /// Mass of the row, i.e. sum over positions.
    pub fn row_sum(&self, layer: usize, head: usize) -> f32 {
        self.row(layer, head).iter().sum()
    }
}
