use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Post-softmax scaling of attention toward a set of prompt positions.
///
/// Applies to every head of `layer`. On the anchor query row (the last
/// prompt token) the entries `A[T, j]` for `j` in `target_indices` are
/// multiplied by `lambda`; when `apply_during_generation` is set the same
/// scaling is applied to every later query row produced while decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingHookSpec {
    pub layer: usize,
    pub target_indices: BTreeSet<usize>,
    pub lambda: f32,
    pub apply_during_generation: bool,
}

impl ScalingHookSpec {
    pub fn new(layer: usize, target_indices: impl IntoIterator<Item = usize>, lambda: f32) -> Self {
        ScalingHookSpec {
            layer,
            target_indices: target_indices.into_iter().collect(),
            lambda,
            apply_during_generation: true,
        }
    }
}

/// The full set of scaling hooks active for one evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InterventionHooks {
    pub specs: Vec<ScalingHookSpec>,
    /// Renormalize a scaled row back to unit mass. Off by default: the
    /// scaled row keeps total mass `1 - (1 - lambda) * sum(A[T, targets])`.
    pub renormalize_row: bool,
}

impl InterventionHooks {
    pub fn new(specs: Vec<ScalingHookSpec>) -> Self {
        InterventionHooks {
            specs,
            renormalize_row: false,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Checks layer bounds, lambda range and that targets fall inside the
    /// prompt (`< prompt_len`).
    pub fn validate(&self, n_layers: usize, prompt_len: usize) -> Result<()> {
        for s in &self.specs {
            if s.layer >= n_layers {
                return Err(Error::InvalidHook(format!(
                    "layer {} out of range for {} layers",
                    s.layer, n_layers
                )));
            }
            if !(s.lambda > 0.0 && s.lambda <= 1.0) {
                return Err(Error::InvalidHook(format!("lambda {} outside (0, 1]", s.lambda)));
            }
            if let Some(&j) = s.target_indices.iter().next_back() {
                if j >= prompt_len {
                    return Err(Error::InvalidHook(format!(
                        "target index {j} outside prompt of {prompt_len} tokens"
                    )));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn for_layer(&self, layer: usize) -> impl Iterator<Item = &ScalingHookSpec> {
        self.specs.iter().filter(move |s| s.layer == layer)
    }

    pub(crate) fn touches_layer(&self, layer: usize) -> bool {
        self.specs.iter().any(|s| s.layer == layer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_bounds() {
        let ok = InterventionHooks::new(vec![ScalingHookSpec::new(1, [0, 2], 0.5)]);
        ok.validate(2, 3).unwrap();
        assert!(ok.validate(1, 3).is_err());
        assert!(ok.validate(2, 2).is_err());
        let zero = InterventionHooks::new(vec![ScalingHookSpec::new(0, [0], 0.0)]);
        assert!(zero.validate(2, 3).is_err());
        let big = InterventionHooks::new(vec![ScalingHookSpec::new(0, [0], 1.5)]);
        assert!(big.validate(2, 3).is_err());
    }
}
