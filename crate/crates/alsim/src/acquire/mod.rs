//! Acquisition functions and the shared dispatch.
//!
//! Timing follows the runtime-table convention: inference time covers the
//! stochastic forward passes over the unlabeled pool (only the uncertainty
//! functions pay it; it is reported as exactly 0 for the others), selection
//! time covers scoring, ranking, clustering, or greedy search.

pub mod diversity;
pub mod uncertainty;

use std::time::Instant;

use crate::corpus::Pool;
use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::tinynet::Weights;

pub use diversity::{
    alps_select, badge_select, embed_km_select, kmeans, kmeans_objective, kmeanspp_seed,
    random_select, ClusterAssignment, ClusterStyle, SelectOutcome,
};
pub use uncertainty::{
    joint_entropy_exact, joint_entropy_sampled, mc_sample, score_bald, score_batchbald,
    score_entropy, score_least_confidence, select_top_k, BatchBaldConfig, BatchBaldSelection,
    PredictiveSample,
};

/// The acquisition strategies under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcquisitionFn {
    Random,
    Entropy,
    LeastConfidence,
    Bald,
    BatchBald,
    Badge,
    Alps,
    EmbedKm,
}

impl AcquisitionFn {
    pub const ALL: [AcquisitionFn; 8] = [
        AcquisitionFn::Random,
        AcquisitionFn::Entropy,
        AcquisitionFn::LeastConfidence,
        AcquisitionFn::Bald,
        AcquisitionFn::BatchBald,
        AcquisitionFn::Badge,
        AcquisitionFn::Alps,
        AcquisitionFn::EmbedKm,
    ];

    /// Whether the function needs MC-dropout forward passes over the pool.
    pub fn needs_inference(self) -> bool {
        matches!(
            self,
            AcquisitionFn::Entropy
                | AcquisitionFn::LeastConfidence
                | AcquisitionFn::Bald
                | AcquisitionFn::BatchBald
        )
    }
}

impl std::fmt::Display for AcquisitionFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            AcquisitionFn::Random => "random",
            AcquisitionFn::Entropy => "entropy",
            AcquisitionFn::LeastConfidence => "lc",
            AcquisitionFn::Bald => "bald",
            AcquisitionFn::BatchBald => "batchbald",
            AcquisitionFn::Badge => "badge",
            AcquisitionFn::Alps => "alps",
            AcquisitionFn::EmbedKm => "embed_km",
        };
        write!(f, "{name}")
    }
}

impl std::str::FromStr for AcquisitionFn {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "random" => AcquisitionFn::Random,
            "entropy" => AcquisitionFn::Entropy,
            "lc" | "least_confidence" => AcquisitionFn::LeastConfidence,
            "bald" => AcquisitionFn::Bald,
            "batchbald" => AcquisitionFn::BatchBald,
            "badge" => AcquisitionFn::Badge,
            "alps" => AcquisitionFn::Alps,
            "embed_km" | "bertkm" => AcquisitionFn::EmbedKm,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown acquisition function `{other}`"
                )))
            }
        })
    }
}

/// Knobs shared by the acquisition functions.
#[derive(Debug, Clone)]
pub struct AcquisitionConfig {
    /// Stochastic passes for the uncertainty functions.
    pub n_passes: usize,
    pub batchbald: BatchBaldConfig,
    /// Token subsample fraction for surprisal embeddings.
    pub alps_mask_fraction: f64,
    /// Score from a single deterministic (no-dropout) pass instead of mean
    /// stochastic passes; an ablation knob for the uncertainty functions.
    pub deterministic_scoring: bool,
    /// Clustering style for the diversity functions.
    pub cluster_style: ClusterStyle,
    /// Keep per-candidate scores in the result (for dumps).
    pub keep_scores: bool,
    /// Keep embedding rows in the result (for dumps).
    pub keep_rows: bool,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            n_passes: 10,
            batchbald: BatchBaldConfig::default(),
            alps_mask_fraction: 0.15,
            deterministic_scoring: false,
            cluster_style: ClusterStyle::PerFunction,
            keep_scores: false,
            keep_rows: false,
        }
    }
}

/// What an acquisition produced: the chosen ids plus scores, timing, and
/// any degeneracy notes.
#[derive(Debug, Clone)]
pub struct AcquisitionResult {
    pub function: AcquisitionFn,
    pub selected: Vec<usize>,
    /// (example id, score) per scored candidate, when kept. For the greedy
    /// batch function the scores are per selection step instead.
    pub scores: Option<Vec<(usize, f64)>>,
    /// Embedding rows in candidate order, when kept (diversity functions).
    pub rows: Option<Vec<Vec<f64>>>,
    pub inference_seconds: f64,
    pub selection_seconds: f64,
    pub notes: Vec<String>,
}

/// Scores the unlabeled pool with the chosen function and selects k ids.
pub fn acquire(
    function: AcquisitionFn,
    w: &Weights,
    pool: &Pool,
    k: usize,
    cfg: &AcquisitionConfig,
    acq_seed: u64,
) -> Result<AcquisitionResult> {
    let ids: Vec<usize> = pool.pool_idx().iter().copied().collect();
    if k > ids.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot acquire {k} from a pool of {}",
            ids.len()
        )));
    }
    if k == 0 {
        return Ok(AcquisitionResult {
            function,
            selected: Vec::new(),
            scores: None,
            rows: None,
            inference_seconds: 0.0,
            selection_seconds: 0.0,
            notes: Vec::new(),
        });
    }

    match function {
        AcquisitionFn::Random => {
            let start = Instant::now();
            let selected = random_select(
                &ids,
                k,
                &mut seed::rng(seed::derive(acq_seed, Stream::Acquisition, 0)),
            )?;
            Ok(AcquisitionResult {
                function,
                selected,
                scores: None,
                rows: None,
                inference_seconds: 0.0,
                selection_seconds: start.elapsed().as_secs_f64(),
                notes: Vec::new(),
            })
        }
        AcquisitionFn::Entropy | AcquisitionFn::LeastConfidence | AcquisitionFn::Bald => {
            let sample = if cfg.deterministic_scoring {
                uncertainty::eval_sample(w, pool, &ids)?
            } else {
                mc_sample(w, pool, &ids, cfg.n_passes, acq_seed)?
            };
            let start = Instant::now();
            let scores = match function {
                AcquisitionFn::Entropy => score_entropy(&sample),
                AcquisitionFn::LeastConfidence => score_least_confidence(&sample),
                _ => score_bald(&sample),
            };
            let selected = select_top_k(&scores, &ids, k)?;
            let selection_seconds = start.elapsed().as_secs_f64();
            Ok(AcquisitionResult {
                function,
                selected,
                scores: cfg
                    .keep_scores
                    .then(|| ids.iter().copied().zip(scores).collect()),
                rows: None,
                inference_seconds: sample.inference_seconds,
                selection_seconds,
                notes: Vec::new(),
            })
        }
        AcquisitionFn::BatchBald => {
            let sample = if cfg.deterministic_scoring {
                uncertainty::eval_sample(w, pool, &ids)?
            } else {
                mc_sample(w, pool, &ids, cfg.n_passes, acq_seed)?
            };
            let start = Instant::now();
            let selection = score_batchbald(&sample, k, &cfg.batchbald, acq_seed)?;
            let selected: Vec<usize> = selection.positions.iter().map(|&p| ids[p]).collect();
            let selection_seconds = start.elapsed().as_secs_f64();
            Ok(AcquisitionResult {
                function,
                selected: selected.clone(),
                scores: cfg.keep_scores.then(|| {
                    selected
                        .iter()
                        .copied()
                        .zip(selection.step_scores.clone())
                        .collect()
                }),
                rows: None,
                inference_seconds: sample.inference_seconds,
                selection_seconds,
                notes: Vec::new(),
            })
        }
        AcquisitionFn::Badge | AcquisitionFn::Alps | AcquisitionFn::EmbedKm => {
            let start = Instant::now();
            let outcome = match function {
                AcquisitionFn::Badge => {
                    badge_select(w, pool, &ids, k, cfg.cluster_style, acq_seed)?
                }
                AcquisitionFn::Alps => alps_select(
                    w,
                    pool,
                    &ids,
                    k,
                    cfg.alps_mask_fraction,
                    cfg.cluster_style,
                    acq_seed,
                )?,
                _ => embed_km_select(w, pool, &ids, k, cfg.cluster_style, acq_seed)?,
            };
            let selection_seconds = start.elapsed().as_secs_f64();
            Ok(AcquisitionResult {
                function,
                selected: outcome.selected,
                scores: None,
                rows: cfg.keep_rows.then_some(outcome.rows),
                inference_seconds: 0.0,
                selection_seconds,
                notes: outcome.notes,
            })
        }
    }
}
