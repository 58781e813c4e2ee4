//! The active-learning loop: seed batch, then train → evaluate → acquire →
//! label until the iteration or budget limit.
//!
//! Every round re-initializes the model from the same encoder checkpoint
//! with a fresh task head (cold start), fine-tunes on the labeled set,
//! evaluates on the held-out test set, and only then acquires. Each
//! iteration record therefore reflects the model trained before that
//! round's acquisition. When the configured acquisition size would
//! overshoot the budget, the final batch is truncated to what remains.

use rayon::prelude::*;

use crate::acquire::{acquire, AcquisitionConfig, AcquisitionFn};
use crate::adapt::{run_tapt, TaptConfig};
use crate::corpus::Pool;
use crate::error::{Error, Result};
use crate::evalmetrics::{aggregate_curves, evaluate, AggregateRow, IterationRecord};
use crate::seed::{self, Stream};
use crate::tinynet::{init_weights, Weights};
use crate::trainer::{fit, predict_eval, TrainPolicy, TrainReport};

/// One run's configuration (shared across seeds).
#[derive(Debug, Clone)]
pub struct AlLoopConfig {
    pub policy: TrainPolicy,
    pub acquisition: AcquisitionFn,
    /// Acquisition size per iteration.
    pub k: usize,
    /// Absolute cap on the labeled set.
    pub budget: usize,
    /// Maximum AL iterations.
    pub iterations: usize,
    pub acq: AcquisitionConfig,
    pub ece_bins: usize,
}

impl AlLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".to_string()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("need at least one iteration".to_string()));
        }
        if self.budget == 0 {
            return Err(Error::InvalidArgument("budget must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Everything produced in one AL round.
#[derive(Debug, Clone)]
pub struct AlRound {
    pub record: IterationRecord,
    pub train: TrainReport,
    /// Whether this round performed an acquisition afterwards.
    pub acquired: bool,
    /// (id, score) rows when score keeping was requested.
    pub scores: Option<Vec<(usize, f64)>>,
    /// Embedding rows when row keeping was requested.
    pub embedding_rows: Option<Vec<Vec<f64>>>,
    pub notes: Vec<String>,
}

/// Inputs of one training call, exposed to observers so tests can verify
/// that swapping the acquisition function changes only the acquired sets.
#[derive(Debug, Clone)]
pub struct RoundObservation {
    pub round: usize,
    pub labeled: Vec<usize>,
    pub init_digest: u64,
    pub fit_seed: u64,
}

/// Runs the loop, reporting each training call to `observer`.
pub fn run_al_observed(
    pool: &mut Pool,
    encoder: &Weights,
    cfg: &AlLoopConfig,
    run_seed: u64,
    observer: &mut dyn FnMut(&RoundObservation),
) -> Result<Vec<AlRound>> {
    cfg.validate()?;
    if !pool.lab_idx().is_empty() {
        return Err(Error::InvalidArgument(
            "the loop expects an initially empty labeled set".to_string(),
        ));
    }
    if pool.val_idx().is_empty() || pool.test_idx().is_empty() {
        return Err(Error::InvalidArgument(
            "the loop needs nonempty validation and test splits".to_string(),
        ));
    }
    let universe: Vec<usize> = pool
        .lab_idx()
        .iter()
        .chain(pool.pool_idx().iter())
        .copied()
        .collect();

    // Seed batch: uniform, truncated to the budget.
    let q0: Vec<usize> = {
        let ids: Vec<usize> = pool.pool_idx().iter().copied().collect();
        let k0 = cfg.k.min(cfg.budget).min(ids.len());
        crate::acquire::random_select(
            &ids,
            k0,
            &mut seed::rng(seed::derive(run_seed, Stream::Acquisition, 0)),
        )?
    };
    pool.label(&q0)?;

    let val: Vec<usize> = pool.val_idx().iter().copied().collect();
    let test: Vec<usize> = pool.test_idx().iter().copied().collect();
    let mut rounds: Vec<AlRound> = Vec::new();

    for round in 1..=cfg.iterations {
        let labeled: Vec<usize> = pool.lab_idx().iter().copied().collect();
        let init = init_weights(
            &encoder.cfg,
            seed::derive(run_seed, Stream::HeadInit, round as u64),
            Some(encoder),
        )?;
        let fit_seed = seed::derive(run_seed, Stream::Train, round as u64);
        observer(&RoundObservation {
            round,
            labeled: labeled.clone(),
            init_digest: init.digest(),
            fit_seed,
        });
        let (trained, train_report) = fit(&init, pool, &labeled, &val, &cfg.policy, fit_seed)?;

        let (probs, labels) = predict_eval(pool, &trained, &test)?;
        let report = evaluate(&probs, &labels, cfg.ece_bins)?;
        let mut record = IterationRecord {
            iteration: round - 1,
            labeled_size: labeled.len(),
            report,
            inference_seconds: 0.0,
            selection_seconds: 0.0,
            train_seconds: train_report.wall_seconds,
        };

        let remaining = cfg.budget.saturating_sub(pool.lab_idx().len());
        let k_round = cfg.k.min(remaining).min(pool.pool_idx().len());
        if k_round == 0 {
            rounds.push(AlRound {
                record,
                train: train_report,
                acquired: false,
                scores: None,
                embedding_rows: None,
                notes: Vec::new(),
            });
            break;
        }

        let acq_seed = seed::derive(run_seed, Stream::Acquisition, round as u64);
        let result = acquire(cfg.acquisition, &trained, pool, k_round, &cfg.acq, acq_seed)?;
        for &id in &result.selected {
            if !pool.pool_idx().contains(&id) {
                return Err(Error::PoolInvariant(format!(
                    "acquisition returned id {id} outside the unlabeled pool"
                )));
            }
        }
        record.inference_seconds = result.inference_seconds;
        record.selection_seconds = result.selection_seconds;
        pool.label(&result.selected)?;
        pool.verify_partition()?;
        let mut still_there: usize = 0;
        for id in &universe {
            if pool.lab_idx().contains(id) || pool.pool_idx().contains(id) {
                still_there += 1;
            }
        }
        if still_there != universe.len() {
            return Err(Error::PoolInvariant(
                "labeled/pool union no longer covers the original universe".to_string(),
            ));
        }

        rounds.push(AlRound {
            record,
            train: train_report,
            acquired: true,
            scores: result.scores,
            embedding_rows: result.rows,
            notes: result.notes,
        });
        // Once the budget fills, the next round still trains and records the
        // model on the complete labeled set, then stops at k_round == 0.
    }
    Ok(rounds)
}

/// Runs the loop without observation.
pub fn run_al(
    pool: &mut Pool,
    encoder: &Weights,
    cfg: &AlLoopConfig,
    run_seed: u64,
) -> Result<Vec<AlRound>> {
    run_al_observed(pool, encoder, cfg, run_seed, &mut |_| {})
}

/// Result of a multi-seed experiment.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seeds: Vec<u64>,
    pub per_seed: Vec<Vec<AlRound>>,
    pub aggregate: Vec<AggregateRow>,
    pub initial_pool_size: usize,
}

/// Runs the loop once per seed from a shared encoder (adaptation, when
/// used, happens once beforehand and is passed in as `encoder`; per-seed
/// adaptation re-runs it inside each seed instead). Seeds run in parallel
/// with fully isolated pools and generators.
pub fn run_experiment(
    pool_template: &Pool,
    encoder: &Weights,
    cfg: &AlLoopConfig,
    seeds: &[u64],
    master_seed: u64,
    tapt_per_seed: Option<&TaptConfig>,
) -> Result<RunResult> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one seed".to_string()));
    }
    let initial_pool_size = pool_template.pool_idx().len();
    let per_seed: Vec<Vec<AlRound>> = seeds
        .par_iter()
        .map(|&s| {
            let mut pool = pool_template.clone();
            let run_seed = seed::mix(master_seed, s);
            let adapted;
            let enc = match tapt_per_seed {
                Some(tapt_cfg) => {
                    let (w, _) = run_tapt(
                        encoder,
                        &pool,
                        tapt_cfg,
                        seed::derive(run_seed, Stream::TaptVal, 1),
                    )?;
                    adapted = w;
                    &adapted
                }
                None => encoder,
            };
            run_al(&mut pool, enc, cfg, run_seed)
        })
        .collect::<Result<_>>()?;
    let records: Vec<Vec<IterationRecord>> = per_seed
        .iter()
        .map(|rounds| rounds.iter().map(|r| r.record.clone()).collect())
        .collect();
    let aggregate = aggregate_curves(&records, initial_pool_size)?;
    Ok(RunResult {
        seeds: seeds.to_vec(),
        per_seed,
        aggregate,
        initial_pool_size,
    })
}
