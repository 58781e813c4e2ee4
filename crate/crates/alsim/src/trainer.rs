//! Optimization: AdamW with decoupled weight decay, linear warmup/decay
//! scheduling, and the two fine-tuning policies under comparison.
//!
//! SFT is the standard recipe: a fixed 3 epochs, warmup over the first 10%
//! of steps, no bias correction, last checkpoint kept. FT+ trains up to 20
//! epochs with warmup capped at `min(10% of steps, 100)`, bias correction
//! on, 5 validation evaluations per epoch, and keeps the checkpoint with
//! the lowest validation loss.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::corpus::Pool;
use crate::error::{Error, Result};
use crate::evalmetrics;
use crate::seed::{self, Stream};
use crate::tinynet::{
    backward_classify, classify_loss, forward_classify, ClassifyBatch, Grads, Mode, Weights,
};

/// How warmup length is derived from the total step count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarmupRule {
    /// 10% of total steps.
    Fraction10Pct,
    /// min(10% of total steps, 100).
    CappedMin100,
}

/// Number of warmup steps under a rule.
pub fn warmup_steps(rule: WarmupRule, total_steps: usize) -> usize {
    let tenth = total_steps / 10;
    match rule {
        WarmupRule::Fraction10Pct => tenth,
        WarmupRule::CappedMin100 => tenth.min(100),
    }
}

/// Learning rate at a 0-based step: linear warmup to `base_lr`, then linear
/// decay to 0 at `total_steps`. With zero warmup the schedule starts at
/// `base_lr`.
pub fn lr_at(step: usize, total_steps: usize, warmup: usize, base_lr: f64) -> f64 {
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return base_lr;
    }
    base_lr * (total_steps - step) as f64 / (total_steps - warmup) as f64
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;

/// AdamW accumulator state.
#[derive(Debug, Clone)]
pub struct OptimState {
    m: Grads,
    v: Grads,
    t: u64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub bias_correction: bool,
}

impl OptimState {
    pub fn new(w: &Weights, weight_decay: f64, bias_correction: bool) -> Self {
        Self {
            m: Grads::zeros_like(w),
            v: Grads::zeros_like(w),
            t: 0,
            epsilon: 1e-8,
            weight_decay,
            bias_correction,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One AdamW update. Weight decay is decoupled: applied to the weights
/// directly, scaled by `lr`, never through the gradients. Bias correction
/// is applied iff the state's flag is set.
pub fn adamw_step(
    state: &mut OptimState,
    weights: &mut Weights,
    grads: &Grads,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads.blocks() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { block: name });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (c1, c2) = if state.bias_correction {
        (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t))
    } else {
        (1.0, 1.0)
    };
    let decay = lr * state.weight_decay;

    let w_blocks = weights.blocks_mut();
    let g_blocks = grads.blocks();
    let m_blocks = state.m.blocks_mut();
    let v_blocks = state.v.blocks_mut();
    for i in 0..w_blocks.len() {
        let w = &mut *w_blocks[i].1;
        let g = g_blocks[i].1;
        let m = &mut *m_blocks[i].1;
        let v = &mut *v_blocks[i].1;
        for k in 0..w.len() {
            if decay != 0.0 {
                w[k] -= decay * w[k];
            }
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            w[k] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Which fine-tuning recipe a policy encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Sft,
    FtPlus,
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PolicyKind::Sft => write!(f, "sft"),
            PolicyKind::FtPlus => write!(f, "ft+"),
        }
    }
}

/// Fine-tuning hyperparameter bundle.
#[derive(Debug, Clone)]
pub struct TrainPolicy {
    pub kind: PolicyKind,
    pub max_epochs: usize,
    pub warmup_rule: WarmupRule,
    pub evals_per_epoch: usize,
    /// Keep the evaluation with the lowest validation loss (FT+); otherwise
    /// the final weights are returned.
    pub checkpoint_selection: bool,
    pub bias_correction: bool,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Optional abort after this many consecutive evaluations without a
    /// validation-loss improvement. Off by default: checkpoint selection
    /// over the full epoch budget is the deterministic reading of early
    /// stopping.
    pub patience: Option<usize>,
}

impl TrainPolicy {
    pub fn sft(learning_rate: f64, batch_size: usize) -> Self {
        Self {
            kind: PolicyKind::Sft,
            max_epochs: 3,
            warmup_rule: WarmupRule::Fraction10Pct,
            evals_per_epoch: 1,
            checkpoint_selection: false,
            bias_correction: false,
            batch_size,
            learning_rate,
            weight_decay: 0.0,
            patience: None,
        }
    }

    pub fn ft_plus(learning_rate: f64, batch_size: usize) -> Self {
        Self {
            kind: PolicyKind::FtPlus,
            max_epochs: 20,
            warmup_rule: WarmupRule::CappedMin100,
            evals_per_epoch: 5,
            checkpoint_selection: true,
            bias_correction: true,
            batch_size,
            learning_rate,
            weight_decay: 0.0,
            patience: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.evals_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "policy needs max_epochs, evals_per_epoch, batch_size >= 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// One recorded evaluation during fit.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// What happened during one fit call.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub evals: Vec<EvalPoint>,
    pub selected_step: usize,
    pub total_steps: usize,
    pub wall_seconds: f64,
}

impl TrainReport {
    /// Equality over the deterministic fields (everything but wall time).
    pub fn same_trajectory(&self, other: &TrainReport) -> bool {
        self.evals == other.evals
            && self.selected_step == other.selected_step
            && self.total_steps == other.total_steps
    }
}

/// Builds a classification batch for the given example ids, reading labels
/// through the pool's audited accessor.
pub fn batch_for(pool: &Pool, ids: &[usize]) -> Result<ClassifyBatch> {
    let mut seqs = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    for &id in ids {
        let label = pool.label_of(id).ok_or_else(|| {
            Error::InvalidArgument(format!("example {id} has no gold label"))
        })?;
        seqs.push(pool.example(id).tokens.clone());
        labels.push(label);
    }
    Ok(ClassifyBatch { seqs, labels })
}

/// Deterministic eval-mode predictions plus gold labels for a set of ids.
pub fn predict_eval(pool: &Pool, w: &Weights, ids: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut probs = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(256) {
        let batch = batch_for(pool, chunk)?;
        let fwd = forward_classify(w, &batch, Mode::Eval, None)?;
        probs.extend(fwd.probs);
        labels.extend(batch.labels);
    }
    Ok((probs, labels))
}

fn val_metrics(pool: &Pool, w: &Weights, val: &[usize]) -> Result<(f64, f64)> {
    let (probs, labels) = predict_eval(pool, w, val)?;
    Ok((
        classify_loss(&probs, &labels),
        evalmetrics::accuracy(&probs, &labels)?,
    ))
}

/// In-epoch evaluation marks (1-based step within the epoch).
fn eval_marks(policy: &TrainPolicy, steps_per_epoch: usize) -> BTreeSet<usize> {
    if !policy.checkpoint_selection {
        return [steps_per_epoch].into_iter().collect();
    }
    if steps_per_epoch < policy.evals_per_epoch {
        return (1..=steps_per_epoch).collect();
    }
    (1..=policy.evals_per_epoch)
        .map(|j| (j * steps_per_epoch).div_ceil(policy.evals_per_epoch))
        .collect()
}

/// Fine-tunes `init` on the labeled ids, evaluating on the validation ids.
/// Shuffles once per epoch from `fit_seed`; the last partial batch is kept.
pub fn fit(
    init: &Weights,
    pool: &Pool,
    lab: &[usize],
    val: &[usize],
    policy: &TrainPolicy,
    fit_seed: u64,
) -> Result<(Weights, TrainReport)> {
    policy.validate()?;
    if lab.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot fit on an empty labeled set".to_string(),
        ));
    }
    if val.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot fit without a validation set".to_string(),
        ));
    }
    let start = Instant::now();
    let steps_per_epoch = lab.len().div_ceil(policy.batch_size);
    let planned_steps = steps_per_epoch * policy.max_epochs;
    let warmup = warmup_steps(policy.warmup_rule, planned_steps);
    let marks = eval_marks(policy, steps_per_epoch);

    let mut w = init.clone();
    let mut opt = OptimState::new(&w, policy.weight_decay, policy.bias_correction);
    let mut dropout_rng = seed::rng(seed::derive(fit_seed, Stream::Dropout, 0));

    let mut evals: Vec<EvalPoint> = Vec::new();
    let mut best: Option<(f64, usize, Weights)> = None;
    let mut batch_losses: Vec<f64> = Vec::new();
    let mut step = 0usize;
    let mut stale = 0usize;

    'epochs: for epoch in 0..policy.max_epochs {
        let mut order = lab.to_vec();
        order.shuffle(&mut seed::rng(seed::derive(fit_seed, Stream::Train, epoch as u64)));
        for (batch_no, chunk) in order.chunks(policy.batch_size).enumerate() {
            let batch = batch_for(pool, chunk)?;
            let lr = lr_at(step, planned_steps, warmup, policy.learning_rate);
            let fwd = forward_classify(&w, &batch, Mode::Train, Some(&mut dropout_rng))?;
            batch_losses.push(classify_loss(&fwd.probs, &batch.labels));
            let grads = backward_classify(&w, &fwd, &batch)?;
            adamw_step(&mut opt, &mut w, &grads, lr)?;
            step += 1;

            if marks.contains(&(batch_no + 1)) {
                let (val_loss, val_accuracy) = val_metrics(pool, &w, val)?;
                let train_loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
                batch_losses.clear();
                evals.push(EvalPoint {
                    step,
                    train_loss,
                    val_loss,
                    val_accuracy,
                });
                let improved = best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
                if improved {
                    best = Some((val_loss, step, w.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if policy.checkpoint_selection
                        && policy.patience.is_some_and(|p| stale >= p)
                    {
                        break 'epochs;
                    }
                }
            }
        }
    }

    let (weights, selected_step) = if policy.checkpoint_selection {
        let (_, s, bw) = best.expect("at least one evaluation ran");
        (bw, s)
    } else {
        (w, step)
    };
    Ok((
        weights,
        TrainReport {
            evals,
            selected_step,
            total_steps: step,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// One cell of the few-shot sweep.
#[derive(Debug, Clone)]
pub struct SweepRecord {
    pub size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub test_acc: f64,
}

/// Trains on seeded subsamples of the pool for each (size, epochs, seed)
/// combination and records test accuracy. Runs are independent and execute
/// in parallel.
pub fn epoch_sweep(
    encoder: &Weights,
    pool: &Pool,
    sizes: &[usize],
    epochs_list: &[usize],
    seeds: &[u64],
    template: &TrainPolicy,
) -> Result<Vec<SweepRecord>> {
    let available: Vec<usize> = pool.pool_idx().iter().copied().collect();
    for &size in sizes {
        if size > available.len() {
            return Err(Error::InvalidArgument(format!(
                "sweep size {size} exceeds available pool of {}",
                available.len()
            )));
        }
    }
    let val: Vec<usize> = pool.val_idx().iter().copied().collect();
    let test: Vec<usize> = pool.test_idx().iter().copied().collect();
    if test.is_empty() {
        return Err(Error::InvalidArgument(
            "epoch sweep needs a test split".to_string(),
        ));
    }

    let mut jobs = Vec::new();
    for &size in sizes {
        for &epochs in epochs_list {
            for &seed_val in seeds {
                jobs.push((size, epochs, seed_val));
            }
        }
    }
    jobs.par_iter()
        .map(|&(size, epochs, seed_val)| {
            let root = seed::mix(seed::mix(seed_val, size as u64), epochs as u64);
            let mut subsample = available.clone();
            subsample.shuffle(&mut seed::rng(seed::derive(root, Stream::Sweep, 0)));
            subsample.truncate(size);
            let mut policy = template.clone();
            policy.max_epochs = epochs;
            let init = crate::tinynet::init_weights(
                &encoder.cfg,
                seed::derive(root, Stream::Sweep, 1),
                Some(encoder),
            )?;
            let (trained, _) = fit(
                &init,
                pool,
                &subsample,
                &val,
                &policy,
                seed::derive(root, Stream::Sweep, 2),
            )?;
            let (probs, labels) = predict_eval(pool, &trained, &test)?;
            Ok(SweepRecord {
                size,
                epochs,
                seed: seed_val,
                test_acc: evalmetrics::accuracy(&probs, &labels)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_splits, synth_generate, tokenize_examples, Vocab};
    use crate::tinynet::{init_weights, NetConfig};
    use approx::assert_abs_diff_eq;

    fn tiny_cfg(v: usize, c: usize) -> NetConfig {
        NetConfig {
            vocab_size: v,
            embed_dim: 8,
            hidden_dim: 8,
            num_classes: c,
            dropout: 0.1,
            max_len: 32,
        }
    }

    fn synth_pool(n: usize, c: usize, noise: f64, seed: u64) -> (Pool, Vocab) {
        let mut exs = synth_generate(n, c, c * 12, noise, seed).unwrap();
        let vocab = Vocab::build(&exs, 1);
        tokenize_examples(&mut exs, &vocab, 32);
        let pool = make_splits(exs, c, 0.15, 0.15, seed).unwrap();
        (pool, vocab)
    }

    #[test]
    fn warmup_rule_values() {
        assert_eq!(warmup_steps(WarmupRule::CappedMin100, 2000), 100);
        assert_eq!(warmup_steps(WarmupRule::CappedMin100, 500), 50);
        assert_eq!(warmup_steps(WarmupRule::Fraction10Pct, 2000), 200);
        assert_eq!(warmup_steps(WarmupRule::Fraction10Pct, 0), 0);
        assert_eq!(warmup_steps(WarmupRule::CappedMin100, 0), 0);
    }

    #[test]
    fn warmup_capped_matches_fraction_below_1000() {
        for total in [0, 1, 9, 99, 500, 999, 1000] {
            assert_eq!(
                warmup_steps(WarmupRule::CappedMin100, total),
                warmup_steps(WarmupRule::Fraction10Pct, total)
            );
        }
        assert_ne!(
            warmup_steps(WarmupRule::CappedMin100, 2000),
            warmup_steps(WarmupRule::Fraction10Pct, 2000)
        );
    }

    #[test]
    fn lr_schedule_shape() {
        let base = 2e-5;
        assert_abs_diff_eq!(lr_at(100, 1000, 100, base), base, epsilon = 1e-18);
        assert_abs_diff_eq!(lr_at(1000, 1000, 100, base), 0.0, epsilon = 1e-18);
        assert_abs_diff_eq!(lr_at(49, 1000, 100, base), 0.5 * base, epsilon = 1e-18);
        // Zero warmup starts at base.
        assert_abs_diff_eq!(lr_at(0, 100, 0, base), base, epsilon = 1e-18);
    }

    #[test]
    fn lr_schedule_piecewise_linear_single_peak() {
        let base = 0.1;
        let (total, warmup) = (50, 10);
        let lrs: Vec<f64> = (0..=total).map(|s| lr_at(s, total, warmup, base)).collect();
        // The peak value is base, hit at the warmup boundary (the last
        // warmup sample and the first decay sample coincide there).
        let max = lrs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_abs_diff_eq!(max, base, epsilon = 1e-18);
        assert_abs_diff_eq!(lrs[warmup - 1], base, epsilon = 1e-18);
        assert_abs_diff_eq!(lrs[warmup], base, epsilon = 1e-18);
        // Strictly increasing before, strictly decreasing after.
        for w in lrs.windows(2).take(warmup - 1) {
            assert!(w[1] > w[0]);
        }
        for w in lrs.windows(2).skip(warmup) {
            assert!(w[1] < w[0]);
        }
    }

    fn scalar_weights() -> Weights {
        let cfg = NetConfig {
            vocab_size: 1,
            embed_dim: 1,
            hidden_dim: 1,
            num_classes: 1,
            dropout: 0.0,
            max_len: 1,
        };
        crate::tinynet::init_weights(&cfg, 0, None).unwrap()
    }

    #[test]
    fn adamw_first_step_hand_computed() {
        // Single scalar, g = 1, fresh state, lr = 0.1.
        let mut w = scalar_weights();
        let before = w.wc.data[0];
        let mut grads = Grads::zeros_like(&w);
        grads.wc[0] = 1.0;

        // Bias correction on: m_hat = 1, v_hat = 1, update ~ -0.1.
        let mut on = OptimState::new(&w, 0.0, true);
        adamw_step(&mut on, &mut w, &grads, 0.1).unwrap();
        assert_abs_diff_eq!(w.wc.data[0] - before, -0.1 / (1.0 + 1e-8), epsilon = 1e-12);

        // Bias correction off: m = 0.1, v = 0.001, update ~ -0.3162.
        let mut w2 = scalar_weights();
        let before2 = w2.wc.data[0];
        let mut off = OptimState::new(&w2, 0.0, false);
        adamw_step(&mut off, &mut w2, &grads, 0.1).unwrap();
        let expected = -0.1 * 0.1 / (0.001f64.sqrt() + 1e-8);
        assert_abs_diff_eq!(w2.wc.data[0] - before2, expected, epsilon = 1e-12);
    }

    #[test]
    fn adamw_zero_grads_zero_decay_fixed_point() {
        let mut w = scalar_weights();
        let mut grads = Grads::zeros_like(&w);
        grads.wc[0] = 1.0;
        let mut st = OptimState::new(&w, 0.0, true);
        adamw_step(&mut st, &mut w, &grads, 0.1).unwrap();
        let after_one = w.clone();
        let m_before = st.m.wc[0];
        let zero = Grads::zeros_like(&w);
        adamw_step(&mut st, &mut w, &zero, 0.1).unwrap();
        // Weight moves only via the decayed momentum, moments shrink.
        assert!(st.m.wc[0].abs() < m_before.abs());
        assert_ne!(after_one.wc.data[0], w.wc.data[0]); // momentum still acts

        // Fully fresh state + zero grads: weights untouched.
        let mut w3 = scalar_weights();
        let snapshot = w3.clone();
        let mut st3 = OptimState::new(&w3, 0.0, true);
        adamw_step(&mut st3, &mut w3, &zero, 0.1).unwrap();
        assert_eq!(snapshot, w3);
    }

    #[test]
    fn adamw_decoupled_decay_contracts_exactly() {
        let mut w = scalar_weights();
        for (_, block) in w.blocks_mut() {
            for v in block.iter_mut() {
                *v = 2.0;
            }
        }
        let zero = Grads::zeros_like(&w);
        let (lr, lambda) = (0.1, 0.5);
        let mut st = OptimState::new(&w, lambda, true);
        adamw_step(&mut st, &mut w, &zero, lr).unwrap();
        for (_, block) in w.blocks() {
            for &v in block {
                assert_abs_diff_eq!(v, 2.0 * (1.0 - lr * lambda), epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn adamw_first_corrected_step_is_scale_invariant() {
        // The first corrected step is lr * g/(|g| + eps): equal to lr up to
        // the epsilon-to-gradient ratio, whatever the gradient scale.
        for &scale in &[1e-3, 1.0, 1e3, 1e6] {
            let mut w = scalar_weights();
            let before = w.wc.data[0];
            let mut grads = Grads::zeros_like(&w);
            grads.wc[0] = scale;
            let mut st = OptimState::new(&w, 0.0, true);
            adamw_step(&mut st, &mut w, &grads, 0.01).unwrap();
            let update = (w.wc.data[0] - before).abs();
            assert!(
                (update - 0.01).abs() <= 0.01 * 1e-4,
                "scale {scale}: update {update}"
            );
        }
    }

    #[test]
    fn adamw_rejects_non_finite_gradient_naming_block() {
        let mut w = scalar_weights();
        let mut grads = Grads::zeros_like(&w);
        grads.wc[0] = f64::NAN;
        let mut st = OptimState::new(&w, 0.0, true);
        match adamw_step(&mut st, &mut w, &grads, 0.1) {
            Err(Error::NonFiniteGradient { block }) => assert_eq!(block, "Wc"),
            other => panic!("expected non-finite gradient error, got {other:?}"),
        }
    }

    #[test]
    fn eval_marks_five_per_epoch() {
        let policy = TrainPolicy::ft_plus(0.05, 16);
        // 100 examples, batch 16 -> 7 steps per epoch.
        let marks = eval_marks(&policy, 7);
        assert_eq!(marks, [2, 3, 5, 6, 7].into_iter().collect());
        // Fewer steps than evals -> every step.
        assert_eq!(eval_marks(&policy, 3), [1, 2, 3].into_iter().collect());
        // SFT evaluates only at epoch end.
        let sft = TrainPolicy::sft(0.05, 16);
        assert_eq!(eval_marks(&sft, 7), [7].into_iter().collect());
    }

    #[test]
    fn fit_ft_plus_step_arithmetic() {
        let (pool, vocab) = synth_pool(160, 2, 0.0, 5);
        let lab: Vec<usize> = pool.pool_idx().iter().take(100).copied().collect();
        let val: Vec<usize> = pool.val_idx().iter().copied().collect();
        let cfg = tiny_cfg(vocab.size(), 2);
        let init = init_weights(&cfg, 1, None).unwrap();
        let policy = TrainPolicy::ft_plus(0.05, 16);
        let (_, report) = fit(&init, &pool, &lab, &val, &policy, 3).unwrap();
        assert_eq!(report.total_steps, 140); // 7 steps/epoch * 20 epochs
        assert_eq!(report.evals.len(), 100); // 5 evals/epoch * 20 epochs
        assert_eq!(warmup_steps(policy.warmup_rule, 140), 14);
        // Selected eval has the minimum validation loss, earliest on ties.
        let min = report
            .evals
            .iter()
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min);
        let selected = report
            .evals
            .iter()
            .find(|e| e.step == report.selected_step)
            .unwrap();
        assert_eq!(selected.val_loss, min);
        let first_min = report.evals.iter().find(|e| e.val_loss == min).unwrap();
        assert_eq!(first_min.step, report.selected_step);
    }

    #[test]
    fn fit_sft_three_epochs() {
        let (pool, vocab) = synth_pool(160, 2, 0.0, 6);
        let lab: Vec<usize> = pool.pool_idx().iter().take(100).copied().collect();
        let val: Vec<usize> = pool.val_idx().iter().copied().collect();
        let cfg = tiny_cfg(vocab.size(), 2);
        let init = init_weights(&cfg, 1, None).unwrap();
        let policy = TrainPolicy::sft(0.05, 16);
        let (_, report) = fit(&init, &pool, &lab, &val, &policy, 3).unwrap();
        assert_eq!(report.total_steps, 21);
        assert_eq!(warmup_steps(policy.warmup_rule, 21), 2);
        assert_eq!(report.evals.len(), 3); // epoch ends only
        assert_eq!(report.selected_step, 21); // last checkpoint, no selection
    }

    #[test]
    fn fit_is_deterministic() {
        let (pool, vocab) = synth_pool(120, 3, 0.2, 7);
        let lab: Vec<usize> = pool.pool_idx().iter().take(60).copied().collect();
        let val: Vec<usize> = pool.val_idx().iter().copied().collect();
        let cfg = tiny_cfg(vocab.size(), 3);
        let init = init_weights(&cfg, 2, None).unwrap();
        let policy = TrainPolicy::ft_plus(0.05, 16);
        let (w_a, rep_a) = fit(&init, &pool, &lab, &val, &policy, 11).unwrap();
        let (w_b, rep_b) = fit(&init, &pool, &lab, &val, &policy, 11).unwrap();
        assert!(rep_a.same_trajectory(&rep_b));
        assert_eq!(w_a.digest(), w_b.digest());
        let (_, rep_c) = fit(&init, &pool, &lab, &val, &policy, 12).unwrap();
        assert!(!rep_a.same_trajectory(&rep_c));
    }

    #[test]
    fn fit_rejects_empty_sets() {
        let (pool, vocab) = synth_pool(60, 2, 0.0, 8);
        let val: Vec<usize> = pool.val_idx().iter().copied().collect();
        let cfg = tiny_cfg(vocab.size(), 2);
        let init = init_weights(&cfg, 1, None).unwrap();
        let policy = TrainPolicy::sft(0.05, 16);
        assert!(fit(&init, &pool, &[], &val, &policy, 1).is_err());
        let lab: Vec<usize> = pool.pool_idx().iter().take(10).copied().collect();
        assert!(fit(&init, &pool, &lab, &[], &policy, 1).is_err());
    }

    #[test]
    fn fit_learns_separable_data() {
        let (pool, vocab) = synth_pool(300, 2, 0.0, 9);
        let lab: Vec<usize> = pool.pool_idx().iter().take(100).copied().collect();
        let val: Vec<usize> = pool.val_idx().iter().copied().collect();
        let test: Vec<usize> = pool.test_idx().iter().copied().collect();
        let cfg = tiny_cfg(vocab.size(), 2);
        let init = init_weights(&cfg, 1, None).unwrap();
        let policy = TrainPolicy::ft_plus(0.05, 16);
        let (trained, _) = fit(&init, &pool, &lab, &val, &policy, 3).unwrap();
        let (probs, labels) = predict_eval(&pool, &trained, &test).unwrap();
        let acc = evalmetrics::accuracy(&probs, &labels).unwrap();
        assert!(acc > 0.9, "expected separable data to train, got {acc}");
    }

    #[test]
    fn epoch_sweep_grid_shape() {
        let (pool, vocab) = synth_pool(200, 2, 0.0, 10);
        let cfg = tiny_cfg(vocab.size(), 2);
        let encoder = init_weights(&cfg, 1, None).unwrap();
        let template = TrainPolicy::sft(0.05, 16);
        let records =
            epoch_sweep(&encoder, &pool, &[20, 40], &[1, 2], &[1, 2], &template).unwrap();
        assert_eq!(records.len(), 8);
        assert_eq!(records[0].size, 20);
        assert_eq!(records[7].size, 40);
        // Single cell -> single run.
        let one = epoch_sweep(&encoder, &pool, &[20], &[2], &[5], &template).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn epoch_sweep_rejects_oversized_request() {
        let (pool, vocab) = synth_pool(60, 2, 0.0, 11);
        let cfg = tiny_cfg(vocab.size(), 2);
        let encoder = init_weights(&cfg, 1, None).unwrap();
        let template = TrainPolicy::sft(0.05, 16);
        assert!(epoch_sweep(&encoder, &pool, &[10_000], &[3], &[1], &template).is_err());
    }
}
