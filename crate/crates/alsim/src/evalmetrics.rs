//! Accuracy plus the uncertainty-calibration suite (Brier score, negative
//! log likelihood, expected calibration error, predictive entropy), curve
//! aggregation across seeds, and the data-efficiency summary.
//!
//! Entropies are in nats throughout (divide by ln 2 for bits).

use crate::error::{Error, Result};

/// Full evaluation of one prediction set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub brier: f64,
    pub nll: f64,
    pub ece: f64,
    pub mean_entropy: f64,
    pub n: usize,
}

/// Wall-clock cost of one acquisition: forward passes vs. ranking/selection.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingRecord {
    pub function: String,
    pub inference_seconds: f64,
    pub selection_seconds: f64,
}

fn check_inputs(preds: &[Vec<f64>], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument(
            "metrics need at least one prediction".to_string(),
        ));
    }
    if preds.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Fraction of examples whose argmax matches the label; argmax ties go to
/// the lowest class id.
pub fn accuracy(preds: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_inputs(preds, labels)?;
    let correct = preds
        .iter()
        .zip(labels)
        .filter(|(p, &y)| crate::tinynet::argmax_lowest(p) == y)
        .count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Mean over examples of the squared distance between the predicted
/// distribution and the label one-hot.
pub fn brier(preds: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_inputs(preds, labels)?;
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            p.iter()
                .enumerate()
                .map(|(c, &pc)| {
                    let target = if c == y { 1.0 } else { 0.0 };
                    (pc - target) * (pc - target)
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / preds.len() as f64)
}

/// Mean negative log likelihood, with probabilities clamped at 1e-12.
pub fn nll(preds: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_inputs(preds, labels)?;
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(p, &y)| -(p[y].max(1e-12)).ln())
        .sum();
    Ok(total / preds.len() as f64)
}

/// Expected calibration error over equal-width confidence bins.
///
/// Confidence is the max predicted probability. A confidence exactly on a
/// bin boundary lands in the upper bin; empty bins contribute nothing.
pub fn ece(preds: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<f64> {
    check_inputs(preds, labels)?;
    if bins == 0 {
        return Err(Error::InvalidArgument("ece needs bins >= 1".to_string()));
    }
    let mut bin_n = vec![0usize; bins];
    let mut bin_conf = vec![0.0f64; bins];
    let mut bin_acc = vec![0.0f64; bins];
    for (p, &y) in preds.iter().zip(labels) {
        let pred = crate::tinynet::argmax_lowest(p);
        let conf = p[pred];
        let b = ((conf * bins as f64) as usize).min(bins - 1);
        bin_n[b] += 1;
        bin_conf[b] += conf;
        bin_acc[b] += if pred == y { 1.0 } else { 0.0 };
    }
    let n = preds.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        if bin_n[b] == 0 {
            continue;
        }
        let nb = bin_n[b] as f64;
        total += (nb / n) * ((bin_acc[b] / nb) - (bin_conf[b] / nb)).abs();
    }
    Ok(total)
}

/// Shannon entropy of a distribution in nats, with 0 ln 0 := 0.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum()
}

/// Mean predictive entropy over examples.
pub fn mean_entropy(preds: &[Vec<f64>]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument(
            "metrics need at least one prediction".to_string(),
        ));
    }
    Ok(preds.iter().map(|p| entropy(p)).sum::<f64>() / preds.len() as f64)
}

/// All metrics in one pass.
pub fn evaluate(preds: &[Vec<f64>], labels: &[usize], ece_bins: usize) -> Result<EvalReport> {
    Ok(EvalReport {
        accuracy: accuracy(preds, labels)?,
        brier: brier(preds, labels)?,
        nll: nll(preds, labels)?,
        ece: ece(preds, labels, ece_bins)?,
        mean_entropy: mean_entropy(preds)?,
        n: preds.len(),
    })
}

/// Median of a slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Population standard deviation.
pub fn pop_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Per-iteration metrics of one active-learning run.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub labeled_size: usize,
    pub report: EvalReport,
    pub inference_seconds: f64,
    pub selection_seconds: f64,
    pub train_seconds: f64,
}

/// One row of the aggregate curve: median and population std of each metric
/// across seeds, timing as medians.
#[derive(Debug, Clone)]
pub struct AggregateRow {
    pub iteration: usize,
    pub labeled_size: usize,
    pub labeled_frac: f64,
    pub median_acc: f64,
    pub std_acc: f64,
    pub median_brier: f64,
    pub std_brier: f64,
    pub median_nll: f64,
    pub std_nll: f64,
    pub median_ece: f64,
    pub std_ece: f64,
    pub median_entropy: f64,
    pub std_entropy: f64,
    pub inference_s: f64,
    pub selection_s: f64,
    pub train_s: f64,
}

/// Aggregates per-seed iteration records into median/std curves. All seeds
/// must share the same iteration grid.
pub fn aggregate_curves(
    per_seed: &[Vec<IterationRecord>],
    initial_pool: usize,
) -> Result<Vec<AggregateRow>> {
    if per_seed.is_empty() {
        return Err(Error::InvalidArgument("no seed records".to_string()));
    }
    let grid: Vec<(usize, usize)> = per_seed[0]
        .iter()
        .map(|r| (r.iteration, r.labeled_size))
        .collect();
    for (i, records) in per_seed.iter().enumerate() {
        let g: Vec<(usize, usize)> = records
            .iter()
            .map(|r| (r.iteration, r.labeled_size))
            .collect();
        if g != grid {
            return Err(Error::InvalidArgument(format!(
                "seed {i} has a ragged iteration grid"
            )));
        }
    }
    let mut rows = Vec::with_capacity(grid.len());
    for (row_i, &(iteration, labeled_size)) in grid.iter().enumerate() {
        let col = |f: &dyn Fn(&IterationRecord) -> f64| -> Vec<f64> {
            per_seed.iter().map(|s| f(&s[row_i])).collect()
        };
        let acc = col(&|r| r.report.accuracy);
        let brier = col(&|r| r.report.brier);
        let nll = col(&|r| r.report.nll);
        let ece = col(&|r| r.report.ece);
        let ent = col(&|r| r.report.mean_entropy);
        rows.push(AggregateRow {
            iteration,
            labeled_size,
            labeled_frac: labeled_size as f64 / initial_pool as f64,
            median_acc: median(&acc),
            std_acc: pop_std(&acc),
            median_brier: median(&brier),
            std_brier: pop_std(&brier),
            median_nll: median(&nll),
            std_nll: pop_std(&nll),
            median_ece: median(&ece),
            std_ece: pop_std(&ece),
            median_entropy: median(&ent),
            std_entropy: pop_std(&ent),
            inference_s: median(&col(&|r| r.inference_seconds)),
            selection_s: median(&col(&|r| r.selection_seconds)),
            train_s: median(&col(&|r| r.train_seconds)),
        });
    }
    Ok(rows)
}

/// Smallest labeled fraction whose median accuracy reaches the full-data
/// target, or None if the curve never gets there.
pub fn data_efficiency(curve: &[AggregateRow], full_data_accuracy: f64) -> Option<f64> {
    curve
        .iter()
        .find(|r| r.median_acc >= full_data_accuracy)
        .map(|r| r.labeled_frac)
}
