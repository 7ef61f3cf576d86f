//! Sampled first-token generation and the sampler-parameter sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::SeedBuilder;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    /// `None` keeps every token.
    pub top_k: Option<usize>,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

fn argmax_f64(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Tokens kept after temperature, top-k and top-p (in that order), with
/// their unnormalized weights, highest weight first.
pub fn truncated_support(dist: &[f64], sampler: &SamplerConfig) -> Vec<(usize, f64)> {
    let max_p = dist.iter().copied().fold(0.0f64, f64::max);
    if max_p <= 0.0 {
        return Vec::new();
    }
    let log_max = max_p.ln();
    // p^(1/T), rescaled by the largest entry to stay in range.
    let mut weighted: Vec<(usize, f64)> = dist
        .iter()
        .enumerate()
        .filter(|(_, p)| **p > 0.0)
        .map(|(i, p)| (i, ((p.ln() - log_max) / sampler.temperature).exp()))
        .filter(|(_, w)| *w > 0.0)
        .collect();
    let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if let Some(k) = sampler.top_k.filter(|k| *k < weighted.len()) {
        weighted.select_nth_unstable_by(k - 1, order);
        weighted.truncate(k);
    }
    weighted.sort_by(order);
    let total: f64 = weighted.iter().map(|(_, w)| w).sum();
    let mut cum = 0.0;
    let mut keep = weighted.len();
    for (n, (_, w)) in weighted.iter().enumerate() {
        cum += w / total;
        if cum >= sampler.top_p {
            keep = n + 1;
            break;
        }
    }
    weighted.truncate(keep);
    weighted
}

/// Draws one token id from `dist` under `sampler`.
pub fn sample_next<R: Rng + ?Sized>(dist: &[f64], sampler: &SamplerConfig, rng: &mut R) -> usize {
    draw(dist, &truncated_support(dist, sampler), rng)
}

/// Categorical draw over a precomputed support; argmax of `dist` when the
/// support carries no mass.
fn draw<R: Rng + ?Sized>(dist: &[f64], support: &[(usize, f64)], rng: &mut R) -> usize {
    let total: f64 = support.iter().map(|(_, w)| w).sum();
    if support.is_empty() || !(total > 0.0) || !total.is_finite() {
        log::warn!("sampler truncated all probability mass; falling back to argmax");
        return argmax_f64(dist);
    }
    let mut u = rng.random::<f64>() * total;
    for &(i, w) in support {
        if u < w {
            return i;
        }
        u -= w;
    }
    support.last().expect("non-empty").0
}

/// Sampler settings crossed into cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub temperatures: Vec<f64>,
    pub top_ps: Vec<f64>,
    pub top_ks: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            temperatures: vec![0.2, 0.8, 1.4],
            top_ps: vec![0.3, 0.8, 0.95],
            top_ks: vec![5, 30, 80],
        }
    }
}

impl SweepGrid {
    /// Cells in temperature-major order.
    pub fn cells(&self) -> Vec<(f64, f64, usize)> {
        let mut cells = Vec::new();
        for &t in &self.temperatures {
            for &p in &self.top_ps {
                for &k in &self.top_ks {
                    cells.push((t, p, k));
                }
            }
        }
        cells
    }
}

/// One prompt's next-token distributions before and after intervention.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPrompt {
    pub id: String,
    pub first_token_ids: [u32; 2],
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountDifferenceCell {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: usize,
    /// Trials per prompt.
    pub trials: usize,
    pub n_prompts: usize,
    /// Totals over prompts.
    pub count_c1: usize,
    pub count_c2: usize,
    pub count_other: usize,
    pub dropped: usize,
    /// More than 10% of trials dropped.
    pub flagged: bool,
    /// Mean over prompts of `|count_c1 - count_c2|`.
    pub abs_difference: f64,
    pub intervention_active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub pre: CountDifferenceCell,
    pub post: CountDifferenceCell,
}

impl SweepRow {
    pub fn reduced(&self) -> bool {
        self.post.abs_difference < self.pre.abs_difference
    }

    pub fn increased(&self) -> bool {
        self.post.abs_difference > self.pre.abs_difference
    }
}

/// Seed of one trial; shared by the pre and post runs so they are paired.
pub fn trial_seed(global: u64, prompt_id: &str, cell: usize, trial: usize) -> u64 {
    SeedBuilder::new(global)
        .str(prompt_id)
        .u64(cell as u64)
        .u64(trial as u64)
        .finish()
}

fn run_cell(
    prompts: &[SweepPrompt],
    cell_index: usize,
    (temperature, top_p, top_k): (f64, f64, usize),
    trials: usize,
    seed: u64,
    post: bool,
) -> Result<CountDifferenceCell> {
    let mut cell = CountDifferenceCell {
        temperature,
        top_p,
        top_k,
        trials,
        n_prompts: prompts.len(),
        count_c1: 0,
        count_c2: 0,
        count_other: 0,
        dropped: 0,
        flagged: false,
        abs_difference: 0.0,
        intervention_active: post,
    };
    let sampler = SamplerConfig {
        temperature,
        top_p,
        top_k: Some(top_k),
        seed,
    };
    sampler.validate()?;
    let mut diff_sum = 0.0;
    for p in prompts {
        let dist = if post { &p.post } else { &p.pre };
        let (mut c1, mut c2) = (0usize, 0usize);
        if dist.iter().any(|v| !v.is_finite()) {
            cell.dropped += trials;
            continue;
        }
        // The truncated support does not depend on the seed.
        let support = truncated_support(dist, &sampler);
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, &p.id, cell_index, trial));
            let tok = draw(dist, &support, &mut rng) as u32;
            if tok == p.first_token_ids[0] {
                c1 += 1;
            } else if tok == p.first_token_ids[1] {
                c2 += 1;
            } else {
                cell.count_other += 1;
            }
        }
        cell.count_c1 += c1;
        cell.count_c2 += c2;
        diff_sum += c1.abs_diff(c2) as f64;
    }
    if !prompts.is_empty() {
        cell.abs_difference = diff_sum / prompts.len() as f64;
    }
    cell.flagged = cell.dropped * 10 > trials * prompts.len();
    Ok(cell)
}

/// Samples `trials` first tokens per prompt in every grid cell, before and
/// after intervention, with paired seeds.
pub fn count_difference_experiment(
    prompts: &[SweepPrompt],
    grid: &SweepGrid,
    trials: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if prompts.is_empty() {
        return Err(Error::invalid("sweep needs at least one prompt"));
    }
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    grid.cells()
        .into_iter()
        .enumerate()
        .map(|(i, cell)| {
            Ok(SweepRow {
                pre: run_cell(prompts, i, cell, trials, seed, false)?,
                post: run_cell(prompts, i, cell, trials, seed, true)?,
            })
        })
        .collect()
}
