//! MC-dropout predictive sampling and the uncertainty acquisition scores:
//! least confidence, predictive entropy, BALD, and the greedy joint-mutual-
//! information batch extension (BatchBALD).
//!
//! All entropies are natural-log (nats). Scores are "higher = more
//! informative" throughout.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::Pool;
use crate::error::{Error, Result};
use crate::evalmetrics::entropy;
use crate::seed::{self, Stream};
use crate::tinynet::{classify_probs_from_hidden, draw_drop_scale, encode, Weights};

/// N stochastic class distributions per example, in pool order.
#[derive(Debug, Clone)]
pub struct PredictiveSample {
    pub ids: Vec<usize>,
    /// probs[example][pass][class]
    pub probs: Vec<Vec<Vec<f64>>>,
    pub n_passes: usize,
    pub inference_seconds: f64,
}

impl PredictiveSample {
    /// Mean distribution over passes for one example.
    pub fn mean_probs(&self, example: usize) -> Vec<f64> {
        let passes = &self.probs[example];
        let c = passes[0].len();
        let mut mean = vec![0.0; c];
        for pass in passes {
            for (m, &p) in mean.iter_mut().zip(pass) {
                *m += p;
            }
        }
        for m in mean.iter_mut() {
            *m /= passes.len() as f64;
        }
        mean
    }
}

/// Runs `n_passes` stochastic forwards over the given examples with
/// dropout active. Each (example, pass) pair draws its dropout mask from
/// its own derived stream, so results are independent of evaluation order
/// and worker count. Wall time is recorded as the inference cost.
pub fn mc_sample(
    w: &Weights,
    pool: &Pool,
    ids: &[usize],
    n_passes: usize,
    acq_seed: u64,
) -> Result<PredictiveSample> {
    if n_passes == 0 {
        return Err(Error::InvalidArgument(
            "mc_sample needs at least one pass".to_string(),
        ));
    }
    let start = Instant::now();
    let dh = w.cfg.hidden_dim;
    let p = w.cfg.dropout;
    let probs: Vec<Vec<Vec<f64>>> = ids
        .par_iter()
        .enumerate()
        .map(|(pos, &id)| {
            let h = encode(w, &pool.example(id).tokens)?;
            let per_pass = (0..n_passes)
                .map(|pass| {
                    if p == 0.0 {
                        return classify_probs_from_hidden(w, &h);
                    }
                    let pass_seed = seed::derive(acq_seed, Stream::Dropout, pass as u64);
                    let mut rng = seed::rng(seed::mix(pass_seed, pos as u64));
                    let scale = draw_drop_scale(dh, p, &mut rng);
                    let h_drop: Vec<f64> = h.iter().zip(&scale).map(|(a, s)| a * s).collect();
                    classify_probs_from_hidden(w, &h_drop)
                })
                .collect();
            Ok(per_pass)
        })
        .collect::<Result<_>>()?;
    Ok(PredictiveSample {
        ids: ids.to_vec(),
        probs,
        n_passes,
        inference_seconds: start.elapsed().as_secs_f64(),
    })
}

/// A single deterministic (eval-mode) pass per example, packaged as a
/// one-pass predictive sample. Used for single-pass ablation scoring; the
/// disagreement-based scores collapse to zero under it.
pub fn eval_sample(w: &Weights, pool: &Pool, ids: &[usize]) -> Result<PredictiveSample> {
    let start = Instant::now();
    let probs: Vec<Vec<Vec<f64>>> = ids
        .par_iter()
        .map(|&id| {
            let h = encode(w, &pool.example(id).tokens)?;
            Ok(vec![classify_probs_from_hidden(w, &h)])
        })
        .collect::<Result<_>>()?;
    Ok(PredictiveSample {
        ids: ids.to_vec(),
        probs,
        n_passes: 1,
        inference_seconds: start.elapsed().as_secs_f64(),
    })
}

/// 1 - max_c of the mean distribution.
pub fn score_least_confidence(sample: &PredictiveSample) -> Vec<f64> {
    (0..sample.probs.len())
        .map(|i| {
            let mean = sample.mean_probs(i);
            1.0 - mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Entropy of the mean distribution, in nats.
pub fn score_entropy(sample: &PredictiveSample) -> Vec<f64> {
    (0..sample.probs.len())
        .map(|i| entropy(&sample.mean_probs(i)))
        .collect()
}

/// The MC-dropout mutual-information estimator:
/// `H[mean_n p_n] - mean_n H[p_n]`.
pub fn score_bald(sample: &PredictiveSample) -> Vec<f64> {
    (0..sample.probs.len())
        .map(|i| {
            let marginal = entropy(&sample.mean_probs(i));
            let conditional = sample.probs[i].iter().map(|p| entropy(p)).sum::<f64>()
                / sample.n_passes as f64;
            marginal - conditional
        })
        .collect()
}

/// Thresholds for the joint-entropy estimator.
#[derive(Debug, Clone, Copy)]
pub struct BatchBaldConfig {
    /// Enumerate class configurations exactly while `C^(batch+1)` stays at
    /// or below this.
    pub max_exact_configs: usize,
    /// Monte Carlo sample count once enumeration gets too large.
    pub n_joint_samples: usize,
}

impl Default for BatchBaldConfig {
    fn default() -> Self {
        Self {
            max_exact_configs: 100_000,
            n_joint_samples: 10_000,
        }
    }
}

/// Exact joint predictive entropy over class configurations of `set`
/// (positions into the sample). Enumerates all `C^|set|` configurations.
pub fn joint_entropy_exact(sample: &PredictiveSample, set: &[usize]) -> Result<f64> {
    let n = sample.n_passes;
    let c = sample.probs[0][0].len();
    let size = (c as f64).powi(set.len() as i32);
    if size > 5e7 {
        return Err(Error::InvalidArgument(format!(
            "exact joint over {size} configurations is too large"
        )));
    }
    let mut per_pass: Vec<Vec<f64>> = vec![vec![1.0]; n];
    for &i in set {
        for (ni, table) in per_pass.iter_mut().enumerate() {
            let dist = &sample.probs[i][ni];
            let mut next = Vec::with_capacity(table.len() * c);
            for &w in table.iter() {
                for &p in dist {
                    next.push(w * p);
                }
            }
            *table = next;
        }
    }
    let configs = per_pass[0].len();
    let mut h = 0.0;
    for cfg_i in 0..configs {
        let mut p = 0.0;
        for table in &per_pass {
            p += table[cfg_i];
        }
        p /= n as f64;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h)
}

fn sample_class(dist: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    dist.len() - 1
}

/// Monte Carlo joint predictive entropy: configurations are drawn from the
/// joint itself (pick a pass uniformly, then classes per example from that
/// pass), and `H = E[-ln P]` is estimated by the sample mean.
pub fn joint_entropy_sampled(
    sample: &PredictiveSample,
    set: &[usize],
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let n = sample.n_passes;
    let mut acc = 0.0;
    let mut config = vec![0usize; set.len()];
    for _ in 0..n_samples {
        let pass = rng.random_range(0..n);
        for (slot, &i) in config.iter_mut().zip(set) {
            *slot = sample_class(&sample.probs[i][pass], rng);
        }
        let mut p = 0.0;
        for ni in 0..n {
            let mut prod = 1.0;
            for (&y, &i) in config.iter().zip(set) {
                prod *= sample.probs[i][ni][y];
            }
            p += prod;
        }
        p /= n as f64;
        acc -= p.max(1e-300).ln();
    }
    acc / n_samples as f64
}

/// Result of the greedy batch selection: chosen positions in pick order and
/// the joint mutual information of the batch after each pick.
#[derive(Debug, Clone)]
pub struct BatchBaldSelection {
    pub positions: Vec<usize>,
    pub step_scores: Vec<f64>,
}

/// Greedy BatchBALD: at each step pick the candidate maximizing the joint
/// mutual information of the selected set plus the candidate. The joint
/// entropy is enumerated exactly while `C^(batch+1) <= max_exact_configs`,
/// then estimated by Monte Carlo. Ties go to the lowest position.
pub fn score_batchbald(
    sample: &PredictiveSample,
    k: usize,
    config: &BatchBaldConfig,
    acq_seed: u64,
) -> Result<BatchBaldSelection> {
    let n_examples = sample.probs.len();
    if k > n_examples {
        return Err(Error::InvalidArgument(format!(
            "cannot select {k} from {n_examples} candidates"
        )));
    }
    let n = sample.n_passes;
    let c = sample.probs[0][0].len();

    // Per-example mean conditional entropy (the subtractive term).
    let cond: Vec<f64> = sample
        .probs
        .iter()
        .map(|passes| passes.iter().map(|p| entropy(p)).sum::<f64>() / n as f64)
        .collect();

    let mut selected: Vec<usize> = Vec::with_capacity(k);
    let mut in_batch = vec![false; n_examples];
    let mut step_scores = Vec::with_capacity(k);
    let mut cond_sum = 0.0;
    // Running per-pass joint over the selected set (exact branch only).
    let mut exact_table: Option<Vec<Vec<f64>>> = Some(vec![vec![1.0]; n]);

    for t in 0..k {
        let exact = (c as f64).powi(t as i32 + 1) <= config.max_exact_configs as f64
            && exact_table.is_some();
        let scores: Vec<Option<f64>> = (0..n_examples)
            .into_par_iter()
            .map(|cand| {
                if in_batch[cand] {
                    return None;
                }
                let h_joint = if exact {
                    let table = exact_table.as_ref().unwrap();
                    extended_entropy(table, &sample.probs[cand], n)
                } else {
                    let mut rng = seed::rng(seed::derive(
                        acq_seed,
                        Stream::Acquisition,
                        seed::mix(t as u64, cand as u64),
                    ));
                    let mut set = selected.clone();
                    set.push(cand);
                    joint_entropy_sampled(sample, &set, config.n_joint_samples, &mut rng)
                };
                Some(h_joint - (cond_sum + cond[cand]))
            })
            .collect();

        let mut best: Option<(usize, f64)> = None;
        for (cand, score) in scores.iter().enumerate() {
            if let Some(s) = score {
                if best.is_none() || *s > best.unwrap().1 {
                    best = Some((cand, *s));
                }
            }
        }
        let (pick, score) = best.expect("at least one unselected candidate");
        selected.push(pick);
        in_batch[pick] = true;
        step_scores.push(score);
        cond_sum += cond[pick];

        // Keep the exact table only while the next step can still use it.
        if exact && (c as f64).powi(t as i32 + 2) <= config.max_exact_configs as f64 {
            let table = exact_table.as_mut().unwrap();
            for (ni, row) in table.iter_mut().enumerate() {
                let dist = &sample.probs[pick][ni];
                let mut next = Vec::with_capacity(row.len() * c);
                for &w in row.iter() {
                    for &p in dist {
                        next.push(w * p);
                    }
                }
                *row = next;
            }
        } else {
            exact_table = None;
        }
    }
    Ok(BatchBaldSelection {
        positions: selected,
        step_scores,
    })
}

/// Entropy of the running joint extended by one candidate, without
/// materializing the extended table.
#[allow(clippy::needless_range_loop)]
fn extended_entropy(table: &[Vec<f64>], cand: &[Vec<f64>], n_passes: usize) -> f64 {
    let configs = table[0].len();
    let c = cand[0].len();
    let mut h = 0.0;
    for cfg_i in 0..configs {
        for y in 0..c {
            let mut p = 0.0;
            for (ni, row) in table.iter().enumerate() {
                p += row[cfg_i] * cand[ni][y];
            }
            p /= n_passes as f64;
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
    }
    h
}

/// The k highest-scoring ids; ties go to the lowest id.
pub fn select_top_k(scores: &[f64], ids: &[usize], k: usize) -> Result<Vec<usize>> {
    if scores.len() != ids.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} ids",
            scores.len(),
            ids.len()
        )));
    }
    if k > ids.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {k} from a pool of {}",
            ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ids[a].cmp(&ids[b]))
    });
    Ok(order[..k].iter().map(|&i| ids[i]).collect())
}
