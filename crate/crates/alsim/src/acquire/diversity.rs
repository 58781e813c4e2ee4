//! Diversity and hybrid acquisition: k-means++ seeding, Lloyd clustering,
//! gradient-embedding selection, masked-head surprisal embeddings, and
//! normalized-encoding clustering.
//!
//! Gradient-embedding selection uses k-means++ seeding directly as the
//! batch (no Lloyd refinement); the surprisal and encoder variants run full
//! k-means and take the row nearest each center. Distances are squared
//! Euclidean throughout; degenerate inputs (fewer distinct rows than
//! clusters) fall back as noted per function.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::Pool;
use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::tinynet::{
    encode, forward_mlm, last_layer_gradient_embedding, MlmBatch, Mode, Weights,
};

/// Which clustering procedure a diversity function uses. The per-function
/// default is k-means++ seeding alone for gradient embeddings and full
/// Lloyd clustering with per-cluster representatives for the surprisal and
/// encoder variants; the override applies one style to all three.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClusterStyle {
    #[default]
    PerFunction,
    SeedOnly,
    Lloyd,
}

impl std::str::FromStr for ClusterStyle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "per_function" | "default" => ClusterStyle::PerFunction,
            "seed_only" => ClusterStyle::SeedOnly,
            "lloyd" => ClusterStyle::Lloyd,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown cluster style `{other}` (expected per_function, seed_only, or lloyd)"
                )))
            }
        })
    }
}

impl std::fmt::Display for ClusterStyle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClusterStyle::PerFunction => write!(f, "per_function"),
            ClusterStyle::SeedOnly => write!(f, "seed_only"),
            ClusterStyle::Lloyd => write!(f, "lloyd"),
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Selects k row positions under the chosen style: either the k-means++
/// seeds directly, or Lloyd clusters' nearest-to-center representatives.
fn cluster_select(rows: &[Vec<f64>], k: usize, style_seed: u64, seed_only: bool) -> Result<Vec<usize>> {
    if seed_only {
        kmeanspp_seed(rows, k, &mut seed::rng(style_seed))
    } else {
        Ok(kmeans(rows, k, style_seed, 50, 1e-6)?.representatives)
    }
}

fn count_distinct(rows: &[Vec<f64>]) -> usize {
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    for row in rows {
        seen.insert(row.iter().map(|v| v.to_bits()).collect());
    }
    seen.len()
}

/// k-means++ seeding: first index uniform, each next sampled proportional
/// to squared distance from the nearest already-chosen center. Exact
/// duplicates of chosen rows carry zero probability.
pub fn kmeanspp_seed(rows: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    if count_distinct(rows) < k {
        return Err(Error::InvalidArgument(format!(
            "k-means++ needs {k} distinct rows, found {}",
            count_distinct(rows)
        )));
    }
    let first = rng.random_range(0..rows.len());
    let mut chosen = vec![first];
    let mut d2: Vec<f64> = rows.iter().map(|r| dist2(r, &rows[first])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            u -= w;
            if u <= 0.0 {
                pick = Some(i);
                break;
            }
        }
        let pick = pick.unwrap_or_else(|| {
            // Rounding pushed us past the end; take the last positive weight.
            d2.iter().rposition(|&w| w > 0.0).expect("positive weight exists")
        });
        chosen.push(pick);
        for (i, w) in d2.iter_mut().enumerate() {
            let d = dist2(&rows[i], &rows[pick]);
            if d < *w {
                *w = d;
            }
        }
    }
    Ok(chosen)
}

/// Cluster structure produced by [`kmeans`].
#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Per cluster, the assigned row nearest its center (ties to the lowest
    /// row index). Always distinct.
    pub representatives: Vec<usize>,
}

fn assign_rows(rows: &[Vec<f64>], centers: &[Vec<f64>]) -> Vec<usize> {
    rows.iter()
        .map(|r| {
            let mut best = 0;
            let mut best_d = dist2(r, &centers[0]);
            for (c, center) in centers.iter().enumerate().skip(1) {
                let d = dist2(r, center);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

/// Lloyd's algorithm from k-means++ seeds. Stops when the largest center
/// movement drops below `tol` or after `max_iters`. An empty cluster is
/// reseeded at the row farthest from its former center.
#[allow(clippy::needless_range_loop)]
pub fn kmeans(
    rows: &[Vec<f64>],
    k: usize,
    km_seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<ClusterAssignment> {
    if rows.is_empty() || k == 0 {
        return Err(Error::InvalidArgument(
            "kmeans needs rows and k >= 1".to_string(),
        ));
    }
    let mut rng = seed::rng(km_seed);
    let seeds = kmeanspp_seed(rows, k, &mut rng)?;
    let dim = rows[0].len();
    let mut centers: Vec<Vec<f64>> = seeds.iter().map(|&i| rows[i].clone()).collect();
    let mut assignment = assign_rows(rows, &centers);

    for _ in 0..max_iters {
        // Reseed empty clusters before the update step.
        for fix_round in 0..=k {
            let mut counts = vec![0usize; k];
            for &a in &assignment {
                counts[a] += 1;
            }
            let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
            if empties.is_empty() {
                break;
            }
            if fix_round == k {
                return Err(Error::InvalidArgument(
                    "kmeans failed to fill all clusters".to_string(),
                ));
            }
            for c in empties {
                let far = (0..rows.len())
                    .max_by(|&a, &b| {
                        dist2(&rows[a], &centers[c])
                            .partial_cmp(&dist2(&rows[b], &centers[c]))
                            .unwrap()
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                centers[c] = rows[far].clone();
            }
            assignment = assign_rows(rows, &centers);
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (row, &a) in rows.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(row) {
                *s += v;
            }
        }
        let mut movement = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for s in sums[c].iter_mut() {
                *s /= counts[c] as f64;
            }
            movement = movement.max(dist2(&sums[c], &centers[c]).sqrt());
            centers[c] = std::mem::take(&mut sums[c]);
        }
        assignment = assign_rows(rows, &centers);
        if movement < tol {
            break;
        }
    }

    let mut representatives = Vec::with_capacity(k);
    for c in 0..k {
        let rep = (0..rows.len())
            .filter(|&i| assignment[i] == c)
            .min_by(|&a, &b| {
                dist2(&rows[a], &centers[c])
                    .partial_cmp(&dist2(&rows[b], &centers[c]))
                    .unwrap()
                    .then(a.cmp(&b))
            })
            .ok_or_else(|| Error::InvalidArgument("empty cluster in final assignment".to_string()))?;
        representatives.push(rep);
    }
    Ok(ClusterAssignment {
        centers,
        assignment,
        representatives,
    })
}

/// Sum of squared distances from rows to their assigned centers.
pub fn kmeans_objective(rows: &[Vec<f64>], clusters: &ClusterAssignment) -> f64 {
    rows.iter()
        .zip(&clusters.assignment)
        .map(|(r, &a)| dist2(r, &clusters.centers[a]))
        .sum()
}

/// Uniform sample of k ids without replacement.
pub fn random_select(ids: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if k > ids.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {k} from a pool of {}",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(rng);
    shuffled.truncate(k);
    Ok(shuffled)
}

/// Outcome of a diversity selection: chosen ids, any degeneracy notes, and
/// the embedding rows used (pool order), kept for optional dumps.
#[derive(Debug, Clone)]
pub struct SelectOutcome {
    pub selected: Vec<usize>,
    pub notes: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Gradient-embedding selection: build the last-layer gradient embedding of
/// every candidate under the model's own predictions, then take the
/// k-means++ seeds as the batch. Falls back to uniform sampling when the
/// embeddings collapse to fewer than k distinct rows.
pub fn badge_select(
    w: &Weights,
    pool: &Pool,
    ids: &[usize],
    k: usize,
    style: ClusterStyle,
    acq_seed: u64,
) -> Result<SelectOutcome> {
    let rows: Vec<Vec<f64>> = ids
        .par_iter()
        .map(|&id| last_layer_gradient_embedding(w, &pool.example(id).tokens))
        .collect::<Result<_>>()?;
    let mut notes = Vec::new();
    let selected = if count_distinct(&rows) < k {
        notes.push(format!(
            "gradient embeddings have {} distinct rows for k={k}; falling back to random selection",
            count_distinct(&rows)
        ));
        random_select(ids, k, &mut seed::rng(seed::derive(acq_seed, Stream::Acquisition, 1)))?
    } else {
        let seed_only = style != ClusterStyle::Lloyd;
        let picks = cluster_select(
            &rows,
            k,
            seed::derive(acq_seed, Stream::Acquisition, 0),
            seed_only,
        )?;
        picks.into_iter().map(|p| ids[p]).collect()
    };
    Ok(SelectOutcome {
        selected,
        notes,
        rows,
    })
}

/// Surprisal-embedding selection: run the masked-token head over the
/// unmasked input, score a seeded 15%-style subsample of positions by the
/// cross entropy of the model's prediction against the actual token, and
/// cluster the fixed-length surprisal vectors. Representatives per cluster
/// form the batch. All-identical surprisal rows fall back to the lowest k
/// ids.
pub fn alps_select(
    w: &Weights,
    pool: &Pool,
    ids: &[usize],
    k: usize,
    mask_fraction: f64,
    style: ClusterStyle,
    acq_seed: u64,
) -> Result<SelectOutcome> {
    let max_len = w.cfg.max_len;
    let rows: Vec<Vec<f64>> = ids
        .par_iter()
        .enumerate()
        .map(|(pos, &id)| {
            let tokens = &pool.example(id).tokens;
            let len = tokens.len();
            let n_sample = ((mask_fraction * len as f64).ceil() as usize).clamp(1, len);
            let mut positions: Vec<usize> = (0..len).collect();
            positions.shuffle(&mut seed::rng(seed::mix(
                seed::derive(acq_seed, Stream::Mask, 0),
                pos as u64,
            )));
            positions.truncate(n_sample);
            let targets: Vec<(usize, u32)> = positions.iter().map(|&p| (p, tokens[p])).collect();
            let batch = MlmBatch {
                seqs: vec![tokens.clone()],
                targets: vec![targets.clone()],
            };
            let fwd = forward_mlm(w, &batch, Mode::Eval, None)?;
            let mut s_x = vec![0.0; max_len];
            for &(p, tgt) in &targets {
                s_x[p] = -(fwd.probs[0][tgt as usize].max(1e-12)).ln();
            }
            Ok(s_x)
        })
        .collect::<Result<_>>()?;

    let mut notes = Vec::new();
    let selected = if count_distinct(&rows) < k {
        notes.push(format!(
            "surprisal embeddings have {} distinct rows for k={k}; taking the lowest ids",
            count_distinct(&rows)
        ));
        ids.iter().take(k).copied().collect()
    } else {
        let seed_only = style == ClusterStyle::SeedOnly;
        let picks = cluster_select(
            &rows,
            k,
            seed::derive(acq_seed, Stream::Acquisition, 0),
            seed_only,
        )?;
        picks.into_iter().map(|p| ids[p]).collect()
    };
    Ok(SelectOutcome {
        selected,
        notes,
        rows,
    })
}

/// Clustering over l2-normalized encoder outputs; one representative per
/// cluster. Zero-norm encodings are excluded and noted.
pub fn embed_km_select(
    w: &Weights,
    pool: &Pool,
    ids: &[usize],
    k: usize,
    style: ClusterStyle,
    acq_seed: u64,
) -> Result<SelectOutcome> {
    let raw: Vec<Vec<f64>> = ids
        .par_iter()
        .map(|&id| encode(w, &pool.example(id).tokens))
        .collect::<Result<_>>()?;
    let mut notes = Vec::new();
    let mut kept_ids = Vec::new();
    let mut rows = Vec::new();
    for (row, &id) in raw.iter().zip(ids) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            notes.push(format!("example {id} has a zero-norm encoding; excluded"));
            continue;
        }
        rows.push(row.iter().map(|v| v / norm).collect());
        kept_ids.push(id);
    }
    if kept_ids.len() < k {
        return Err(Error::InvalidArgument(format!(
            "only {} usable encodings for k={k}",
            kept_ids.len()
        )));
    }
    let selected = if count_distinct(&rows) < k {
        notes.push(format!(
            "normalized encodings have {} distinct rows for k={k}; falling back to random selection",
            count_distinct(&rows)
        ));
        random_select(&kept_ids, k, &mut seed::rng(seed::derive(acq_seed, Stream::Acquisition, 1)))?
    } else {
        let seed_only = style == ClusterStyle::SeedOnly;
        let picks = cluster_select(
            &rows,
            k,
            seed::derive(acq_seed, Stream::Acquisition, 0),
            seed_only,
        )?;
        picks.into_iter().map(|p| kept_ids[p]).collect()
    };
    Ok(SelectOutcome {
        selected,
        notes,
        rows,
    })
}
