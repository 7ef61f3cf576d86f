//! Greedy per-layer search for attention scaling factors.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localization::Approach;
use crate::metrics::CandidateProbabilities;
use crate::model::{InterventionHooks, ScalingHookSpec};

/// Default scaling factors, tried in order.
pub const LAMBDA_GRID: [f32; 11] = [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.01];
/// Search halts once the bias ratio is within this of parity.
pub const STOP_TOLERANCE: f64 = 1e-3;

/// Checks a λ grid: non-empty, strictly decreasing, all in (0, 1].
pub fn validate_grid(grid: &[f32]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    if let Some(l) = grid.iter().find(|l| !(**l > 0.0 && **l <= 1.0)) {
        return Err(Error::Config(format!("lambda {l} outside (0, 1]")));
    }
    if grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("lambda grid must be strictly decreasing".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub layer: usize,
    pub lambda: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionPlan {
    /// Edited layers in edit order; a step with λ = 1 is a recorded no-op.
    pub steps: Vec<PlanStep>,
    pub target_indices: BTreeSet<usize>,
    pub k: usize,
    pub approach: Approach,
}

impl InterventionPlan {
    pub fn empty(target_indices: BTreeSet<usize>, k: usize, approach: Approach) -> Self {
        InterventionPlan {
            steps: Vec::new(),
            target_indices,
            k,
            approach,
        }
    }

    /// Steps that actually scale attention.
    pub fn effective_steps(&self) -> impl Iterator<Item = &PlanStep> {
        self.steps.iter().filter(|s| s.lambda < 1.0)
    }

    pub fn is_noop(&self) -> bool {
        self.effective_steps().next().is_none()
    }

    pub fn to_hooks(&self, apply_during_generation: bool, renormalize_row: bool) -> InterventionHooks {
        steps_to_hooks(
            &self.steps,
            &self.target_indices,
            apply_during_generation,
            renormalize_row,
        )
    }
}

pub fn steps_to_hooks(
    steps: &[PlanStep],
    targets: &BTreeSet<usize>,
    apply_during_generation: bool,
    renormalize_row: bool,
) -> InterventionHooks {
    let specs = steps
        .iter()
        .filter(|s| s.lambda < 1.0)
        .map(|s| ScalingHookSpec {
            layer: s.layer,
            target_indices: targets.clone(),
            lambda: s.lambda,
            apply_during_generation,
        })
        .collect();
    InterventionHooks {
        specs,
        renormalize_row,
    }
}

/// Model access needed by the search.
pub trait BiasProbe {
    /// Candidate probabilities with `steps` applied.
    fn evaluate(&mut self, steps: &[PlanStep]) -> Result<CandidateProbabilities>;
    /// Full layer ranking recomputed with `steps` applied.
    fn rerank(&mut self, steps: &[PlanStep]) -> Result<Vec<usize>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaTrial {
    pub lambda: f32,
    pub bias_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// b rose above the previous trial's value.
    Increased,
    /// b came within tolerance of 1.
    Parity,
    /// Every λ in the grid was tried.
    GridExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSearch {
    pub layer: usize,
    /// Ranking the layer was picked from.
    pub ranking: Vec<usize>,
    pub trials: Vec<LambdaTrial>,
    pub committed_lambda: f32,
    pub bias_ratio_before: f64,
    pub bias_ratio_after: f64,
    pub stop: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Maximum number of layers to edit.
    pub k: usize,
    pub lambda_grid: Vec<f32>,
    pub tolerance: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            k: 3,
            lambda_grid: LAMBDA_GRID.to_vec(),
            tolerance: STOP_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub steps: Vec<PlanStep>,
    pub history: Vec<LayerSearch>,
    pub final_probabilities: CandidateProbabilities,
    pub final_bias_ratio: f64,
    /// λ evaluations performed.
    pub evaluations: usize,
    /// Re-localization passes performed.
    pub reranks: usize,
}

/// Greedy layer-by-layer λ search.
///
/// Each step takes the highest-ranked layer from `pool` not yet edited and
/// walks the grid downward, stopping at the first λ whose bias ratio exceeds
/// the previous one and committing the previous λ. Between steps the ranking
/// is recomputed with the committed steps applied. `pool = None` means every
/// layer is eligible.
pub fn greedy_lambda_search<P: BiasProbe + ?Sized>(
    probe: &mut P,
    baseline: CandidateProbabilities,
    initial_ranking: &[usize],
    pool: Option<&[usize]>,
    config: &SearchConfig,
) -> Result<SearchOutcome> {
    validate_grid(&config.lambda_grid)?;
    if config.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let eligible = |l: usize| pool.map_or(true, |p| p.contains(&l));
    let mut steps: Vec<PlanStep> = Vec::new();
    let mut history = Vec::new();
    let mut best = baseline;
    let mut best_b = baseline.bias_ratio();
    let mut ranking = initial_ranking.to_vec();
    let (mut evaluations, mut reranks) = (0, 0);

    while steps.len() < config.k && best_b > 1.0 + config.tolerance {
        let remaining = ranking
            .iter()
            .filter(|l| eligible(**l) && !steps.iter().any(|s| s.layer == **l))
            .count();
        if remaining == 0 {
            break;
        }
        if !steps.is_empty() && remaining > 1 {
            ranking = probe.rerank(&steps)?;
            reranks += 1;
        }
        let layer = *ranking
            .iter()
            .find(|l| eligible(**l) && !steps.iter().any(|s| s.layer == **l))
            .expect("a remaining layer exists");

        let before = best_b;
        let mut committed = 1.0f32;
        let mut trials = Vec::new();
        let mut stop = StopReason::GridExhausted;
        let mut trial_steps = steps.clone();
        trial_steps.push(PlanStep { layer, lambda: 1.0 });
        for &lambda in config.lambda_grid.iter().filter(|l| **l < 1.0) {
            trial_steps.last_mut().unwrap().lambda = lambda;
            let probs = probe.evaluate(&trial_steps)?;
            evaluations += 1;
            let b = probs.bias_ratio();
            trials.push(LambdaTrial { lambda, bias_ratio: b });
            if b > best_b {
                stop = StopReason::Increased;
                break;
            }
            best_b = b;
            best = probs;
            committed = lambda;
            if b <= 1.0 + config.tolerance {
                stop = StopReason::Parity;
                break;
            }
        }
        steps.push(PlanStep {
            layer,
            lambda: committed,
        });
        history.push(LayerSearch {
            layer,
            ranking: ranking.clone(),
            trials,
            committed_lambda: committed,
            bias_ratio_before: before,
            bias_ratio_after: best_b,
            stop,
        });
    }
    Ok(SearchOutcome {
        steps,
        history,
        final_probabilities: best,
        final_bias_ratio: best_b,
        evaluations,
        reranks,
    })
}

/// Minimum bias ratio over every λ combination for `layers` (grid^n
/// evaluations). A test oracle for small models.
pub fn exhaustive_search<P: BiasProbe + ?Sized>(
    probe: &mut P,
    layers: &[usize],
    grid: &[f32],
) -> Result<(Vec<PlanStep>, f64)> {
    validate_grid(grid)?;
    let n = layers.len();
    let mut idx = vec![0usize; n];
    let mut best: Option<(Vec<PlanStep>, f64)> = None;
    loop {
        let steps: Vec<PlanStep> = layers
            .iter()
            .zip(&idx)
            .map(|(&layer, &i)| PlanStep {
                layer,
                lambda: grid[i],
            })
            .collect();
        let b = probe.evaluate(&steps)?.bias_ratio();
        if best.as_ref().map_or(true, |(_, bb)| b < *bb) {
            best = Some((steps, b));
        }
        let mut pos = 0;
        loop {
            if pos == n {
                return Ok(best.expect("at least one combination"));
            }
            idx[pos] += 1;
            if idx[pos] < grid.len() {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Bias ratio given by a per-layer curve over the default grid; layers
    /// multiply together.
    struct Scripted {
        curves: Vec<Vec<f64>>,
        ranking: Vec<usize>,
        evals: usize,
    }

    impl Scripted {
        fn b(&self, steps: &[PlanStep]) -> f64 {
            let mut b = 1.0;
            for (layer, curve) in self.curves.iter().enumerate() {
                let lambda = steps.iter().find(|s| s.layer == layer).map_or(1.0, |s| s.lambda);
                let i = LAMBDA_GRID.iter().position(|l| *l == lambda).unwrap();
                b *= curve[i];
            }
            b
        }
    }

    fn probs(b: f64) -> CandidateProbabilities {
        CandidateProbabilities::from_pair(b / (1.0 + b), 1.0 / (1.0 + b), [0, 1])
    }

    impl BiasProbe for Scripted {
        fn evaluate(&mut self, steps: &[PlanStep]) -> Result<CandidateProbabilities> {
            self.evals += 1;
            Ok(probs(self.b(steps)))
        }

        fn rerank(&mut self, _steps: &[PlanStep]) -> Result<Vec<usize>> {
            Ok(self.ranking.clone())
        }
    }

    fn run(curves: Vec<Vec<f64>>, k: usize) -> SearchOutcome {
        let mut p = Scripted {
            ranking: (0..curves.len()).collect(),
            curves,
            evals: 0,
        };
        let base = probs(p.b(&[]));
        let ranking = p.ranking.clone();
        let cfg = SearchConfig {
            k,
            ..Default::default()
        };
        let out = greedy_lambda_search(&mut p, base, &ranking, None, &cfg).unwrap();
        assert_eq!(out.evaluations, p.evals);
        out
    }

    #[test]
    fn monotone_curve_reaches_smallest_lambda() {
        let curve: Vec<f64> = (0..11).map(|i| 4.0 - 0.25 * i as f64).collect();
        let out = run(vec![curve], 1);
        assert_eq!(out.steps, vec![PlanStep { layer: 0, lambda: 0.01 }]);
        assert_eq!(out.history[0].stop, StopReason::GridExhausted);
        assert_eq!(out.evaluations, 10);
    }

    #[test]
    fn stops_when_ratio_rises() {
        // Decreasing down to λ = 0.6, increasing afterwards.
        let curve = vec![3.0, 2.6, 2.2, 1.9, 1.6, 1.8, 2.0, 2.2, 2.4, 2.6, 2.8];
        let out = run(vec![curve], 1);
        assert_eq!(out.steps[0].lambda, 0.6);
        assert_eq!(out.history[0].stop, StopReason::Increased);
        assert_eq!(out.evaluations, 5);
        assert!((out.final_bias_ratio - 1.6).abs() < 1e-9);
    }

    #[test]
    fn unbiased_prompt_gives_empty_plan() {
        let out = run(vec![vec![1.0; 11]], 3);
        assert!(out.steps.is_empty());
        assert_eq!(out.evaluations, 0);
        assert_eq!(out.final_bias_ratio, 1.0);
    }

    #[test]
    fn all_worse_keeps_identity() {
        let curve = vec![2.0, 2.5, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0];
        let out = run(vec![curve, vec![1.0; 11]], 1);
        assert_eq!(out.steps, vec![PlanStep { layer: 0, lambda: 1.0 }]);
        assert_eq!(out.final_bias_ratio, 2.0);
    }

    #[test]
    fn identity_grid_changes_nothing() {
        let mut p = Scripted {
            curves: vec![vec![2.0, 1.5, 1.2, 1.1, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]],
            ranking: vec![0],
            evals: 0,
        };
        let cfg = SearchConfig {
            lambda_grid: vec![1.0],
            ..Default::default()
        };
        let out = greedy_lambda_search(&mut p, probs(2.0), &[0], None, &cfg).unwrap();
        assert_eq!(out.final_bias_ratio, 2.0);
        assert_eq!(out.evaluations, 0);
    }

    #[test]
    fn evaluation_budget() {
        let curve: Vec<f64> = (0..11).map(|i| 1.5 - 0.01 * i as f64).collect();
        let out = run(vec![curve.clone(), curve.clone(), curve.clone(), curve], 3);
        assert_eq!(out.steps.len(), 3);
        assert!(out.evaluations <= 3 * 11);
        assert_eq!(out.reranks, 2);
    }

    #[test]
    fn parity_stops_early() {
        let curve = vec![2.0, 1.0005, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9];
        let out = run(vec![curve, vec![1.0; 11]], 3);
        assert_eq!(out.steps.len(), 1);
        assert_eq!(out.history[0].stop, StopReason::Parity);
    }

    #[test]
    fn exhaustive_finds_minimum() {
        let mut p = Scripted {
            curves: vec![
                vec![2.0, 1.8, 1.6, 1.4, 1.2, 1.25, 1.3, 1.35, 1.4, 1.45, 1.5],
                vec![1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55, 0.5],
            ],
            ranking: vec![0, 1],
            evals: 0,
        };
        let (steps, b) = exhaustive_search(&mut p, &[0, 1], &LAMBDA_GRID).unwrap();
        assert_eq!(p.evals, 121);
        // 1.25 * 0.8 at (0.5, 0.6) hits parity exactly.
        assert!((b - 1.0).abs() < 1e-9, "{b} {steps:?}");
    }

    #[test]
    fn grid_validation() {
        assert!(validate_grid(&[]).is_err());
        assert!(validate_grid(&[1.0, 1.0]).is_err());
        assert!(validate_grid(&[0.5, 0.0]).is_err());
        assert!(validate_grid(&LAMBDA_GRID).is_ok());
    }
}
