//! Pretext adaptation: continue training the encoder on the unlabeled pool
//! with a masked-token objective before any active learning starts.
//!
//! The adapter holds out a fraction of the pool for pretext validation,
//! evaluates on it at a fixed cadence, and returns the checkpoint with the
//! lowest pretext validation loss. Labels are never read: the whole module
//! operates on token sequences only.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{Pool, Vocab};
use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::tinynet::{backward_mlm, forward_mlm, mlm_loss, MlmBatch, Mode, Weights};
use crate::trainer::{adamw_step, OptimState};

/// Pretext training hyperparameters.
#[derive(Debug, Clone)]
pub struct TaptConfig {
    pub max_steps: usize,
    pub eval_every_steps: usize,
    pub mask_fraction: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Fraction of the pool held out for pretext validation; it rejoins the
    /// pool afterward and never touches the label budget.
    pub val_fraction: f64,
    /// Probability that a selected position's input token is replaced by
    /// MASK (the rest keep the original token but are still predicted).
    /// 1.0 is the simulator's default; there is no random-token branch.
    pub mask_replace_prob: f64,
}

impl Default for TaptConfig {
    fn default() -> Self {
        Self {
            max_steps: 2000,
            eval_every_steps: 100,
            mask_fraction: 0.15,
            learning_rate: 0.01,
            batch_size: 32,
            val_fraction: 0.1,
            mask_replace_prob: 1.0,
        }
    }
}

impl TaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "mask_fraction must be in (0,1), got {}",
                self.mask_fraction
            )));
        }
        if self.max_steps > 0 && self.eval_every_steps > self.max_steps {
            return Err(Error::InvalidArgument(format!(
                "eval_every_steps {} exceeds max_steps {}",
                self.eval_every_steps, self.max_steps
            )));
        }
        if self.eval_every_steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "eval_every_steps and batch_size must be >= 1".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument(format!(
                "val_fraction must be in [0,1), got {}",
                self.val_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_replace_prob) {
            return Err(Error::InvalidArgument(format!(
                "mask_replace_prob must be in [0,1], got {}",
                self.mask_replace_prob
            )));
        }
        Ok(())
    }
}

/// One pretext validation measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct TaptEval {
    pub step: usize,
    pub val_loss: f64,
}

/// Learning curve and checkpoint choice of one adaptation run.
#[derive(Debug, Clone, PartialEq)]
pub struct TaptReport {
    pub evals: Vec<TaptEval>,
    pub selected_step: usize,
}

impl TaptReport {
    pub fn selected_val_loss(&self) -> Option<f64> {
        self.evals
            .iter()
            .find(|e| e.step == self.selected_step)
            .map(|e| e.val_loss)
    }
}

/// Masks `ceil(mask_fraction * len)` positions per sequence, chosen without
/// replacement; input ids at those positions become MASK and the original
/// ids become targets.
pub fn mask_batch(seqs: &[Vec<u32>], mask_fraction: f64, rng: &mut ChaCha8Rng) -> MlmBatch {
    mask_batch_with_replace(seqs, mask_fraction, 1.0, rng)
}

/// As [`mask_batch`], with a configurable probability of actually replacing
/// a selected position's input with MASK; unreplaced positions keep their
/// token but remain prediction targets.
pub fn mask_batch_with_replace(
    seqs: &[Vec<u32>],
    mask_fraction: f64,
    replace_prob: f64,
    rng: &mut ChaCha8Rng,
) -> MlmBatch {
    let mut masked_seqs = Vec::with_capacity(seqs.len());
    let mut targets = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let len = seq.len();
        let n_mask = ((mask_fraction * len as f64).ceil() as usize).clamp(1, len);
        let mut positions: Vec<usize> = (0..len).collect();
        positions.shuffle(rng);
        positions.truncate(n_mask);
        positions.sort_unstable();
        let mut corrupted = seq.clone();
        let mut tgts = Vec::with_capacity(n_mask);
        for &pos in &positions {
            tgts.push((pos, corrupted[pos]));
            if replace_prob >= 1.0 || rng.random::<f64>() < replace_prob {
                corrupted[pos] = Vocab::MASK;
            }
        }
        masked_seqs.push(corrupted);
        targets.push(tgts);
    }
    MlmBatch {
        seqs: masked_seqs,
        targets,
    }
}

fn pretext_val_loss(w: &Weights, val_batches: &[MlmBatch]) -> Result<f64> {
    let mut loss_sum = 0.0;
    let mut positions = 0usize;
    for batch in val_batches {
        let fwd = forward_mlm(w, batch, Mode::Eval, None)?;
        let n: usize = batch.targets.iter().map(|t| t.len()).sum();
        loss_sum += mlm_loss(&fwd.probs, &batch.targets) * n as f64;
        positions += n;
    }
    Ok(loss_sum / positions.max(1) as f64)
}

/// Adapts the encoder on the unlabeled pool. Returns the weights of the
/// evaluation with the lowest pretext validation loss (the initial weights
/// count as the step-0 evaluation) along with the learning curve.
///
/// The classifier head is untouched: the pretext loss has no path to it and
/// weight decay is off, so Wc/bc come back bit-identical.
pub fn run_tapt(
    encoder: &Weights,
    pool: &Pool,
    config: &TaptConfig,
    tapt_seed: u64,
) -> Result<(Weights, TaptReport)> {
    config.validate()?;
    if config.max_steps == 0 {
        return Ok((
            encoder.clone(),
            TaptReport {
                evals: Vec::new(),
                selected_step: 0,
            },
        ));
    }
    let ids: Vec<usize> = pool.pool_idx().iter().copied().collect();
    if ids.is_empty() {
        return Err(Error::InvalidArgument(
            "pretext adaptation needs a nonempty pool".to_string(),
        ));
    }

    // Carve the pretext validation split.
    let mut shuffled = ids.clone();
    shuffled.shuffle(&mut seed::rng(seed::derive(tapt_seed, Stream::TaptVal, 0)));
    let n_val = ((config.val_fraction * shuffled.len() as f64).floor() as usize)
        .clamp(1, shuffled.len() - 1);
    let (val_ids, train_ids) = shuffled.split_at(n_val);
    if train_ids.len() < config.batch_size {
        return Err(Error::InvalidArgument(format!(
            "pool too small for pretext training: {} train docs < batch size {}",
            train_ids.len(),
            config.batch_size
        )));
    }

    // Validation batches are masked once so every evaluation sees the same
    // prediction problem.
    let mut val_mask_rng = seed::rng(seed::derive(tapt_seed, Stream::Mask, u64::MAX));
    let val_batches: Vec<MlmBatch> = val_ids
        .chunks(config.batch_size)
        .map(|chunk| {
            let seqs: Vec<Vec<u32>> = chunk.iter().map(|&id| pool.example(id).tokens.clone()).collect();
            mask_batch_with_replace(
                &seqs,
                config.mask_fraction,
                config.mask_replace_prob,
                &mut val_mask_rng,
            )
        })
        .collect();

    let mut w = encoder.clone();
    let mut opt = OptimState::new(&w, 0.0, true);
    let mut dropout_rng = seed::rng(seed::derive(tapt_seed, Stream::Dropout, 0));

    let step0_loss = pretext_val_loss(&w, &val_batches)?;
    let mut evals = vec![TaptEval {
        step: 0,
        val_loss: step0_loss,
    }];
    let mut best: (f64, usize, Weights) = (step0_loss, 0, w.clone());

    let mut step = 0usize;
    let mut epoch = 0u64;
    'training: loop {
        let mut order = train_ids.to_vec();
        order.shuffle(&mut seed::rng(seed::derive(tapt_seed, Stream::Train, epoch)));
        for chunk in order.chunks(config.batch_size) {
            let seqs: Vec<Vec<u32>> = chunk.iter().map(|&id| pool.example(id).tokens.clone()).collect();
            let mut mask_rng = seed::rng(seed::derive(tapt_seed, Stream::Mask, step as u64));
            let batch = mask_batch_with_replace(
                &seqs,
                config.mask_fraction,
                config.mask_replace_prob,
                &mut mask_rng,
            );
            let fwd = forward_mlm(&w, &batch, Mode::Train, Some(&mut dropout_rng))?;
            let grads = backward_mlm(&w, &fwd, &batch)?;
            adamw_step(&mut opt, &mut w, &grads, config.learning_rate)?;
            step += 1;
            if step.is_multiple_of(config.eval_every_steps) {
                let val_loss = pretext_val_loss(&w, &val_batches)?;
                evals.push(TaptEval { step, val_loss });
                if val_loss < best.0 {
                    best = (val_loss, step, w.clone());
                }
            }
            if step >= config.max_steps {
                break 'training;
            }
        }
        epoch += 1;
    }

    let (_, selected_step, weights) = best;
    Ok((weights, TaptReport {
        evals,
        selected_step,
    }))
}

/// One adaptation run per learning rate, all from the same initial
/// checkpoint and seed. Returns the runs in input order plus the index of
/// the rate with the lowest selected validation loss (ties go to the first).
pub fn tapt_lr_sweep(
    encoder: &Weights,
    pool: &Pool,
    lrs: &[f64],
    config: &TaptConfig,
    tapt_seed: u64,
) -> Result<(Vec<(f64, TaptReport)>, usize)> {
    if lrs.is_empty() {
        return Err(Error::InvalidArgument(
            "learning-rate sweep needs at least one rate".to_string(),
        ));
    }
    let runs: Vec<(f64, TaptReport)> = lrs
        .par_iter()
        .map(|&lr| {
            let cfg = TaptConfig {
                learning_rate: lr,
                ..config.clone()
            };
            run_tapt(encoder, pool, &cfg, tapt_seed).map(|(_, report)| (lr, report))
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, (_, report)) in runs.iter().enumerate() {
        let loss = report.selected_val_loss().unwrap_or(f64::INFINITY);
        let best_loss = runs[best].1.selected_val_loss().unwrap_or(f64::INFINITY);
        if loss < best_loss {
            best = i;
        }
    }
    Ok((runs, best))
}
