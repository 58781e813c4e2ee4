//! Command-line surface: `tapt`, `run`, `fewshot`, and `report`
//! subcommands over a shared config file.
//!
//! Every run directory is self-describing: it holds the resolved config
//! echo, the split manifest, per-seed records, the aggregate curve, and
//! the timing table. Re-running with the echoed config and the same master
//! seed reproduces the directory (wall-clock timing columns aside).

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::acquire::AcquisitionFn;
use crate::adapt::{run_tapt, tapt_lr_sweep};
use crate::alloop::{run_experiment, AlLoopConfig, RunResult};
use crate::config::RunConfig;
use crate::corpus::{build_pool, PoolBundle};
use crate::error::{Error, Result};
use crate::evalmetrics::{data_efficiency, median, AggregateRow};
use crate::runio::write_atomic_str;
use crate::tinynet::{init_weights, load_checkpoint, save_checkpoint, NetConfig, Weights};
use crate::trainer::{epoch_sweep, PolicyKind};

#[derive(Debug, Parser)]
#[command(name = "alsim", about = "Pool-based active-learning simulator")]
pub struct Cli {
    /// Config file with `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed; every stream in the run derives from it.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,

    /// Output directory.
    #[arg(long, global = true, default_value = "runs/out")]
    pub out: PathBuf,

    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Adapt the encoder on the unlabeled pool and write a checkpoint.
    Tapt {
        /// Comma-separated learning rates to sweep; the best (lowest
        /// pretext validation loss) is used for the written checkpoint.
        #[arg(long)]
        sweep_lr: Option<String>,
    },
    /// Run the active-learning experiment.
    Run {
        /// Grid axes, e.g. `--grid strategy=sft,ft+ --grid tapt=on,off`.
        /// Axes: strategy, tapt, acquisition.
        #[arg(long)]
        grid: Vec<String>,
    },
    /// Few-shot fine-tuning sweep over (size, epochs, seed) cells.
    Fewshot,
    /// Merge run directories into comparison and timing tables.
    Report {
        /// Run directories containing aggregate.csv.
        dirs: Vec<PathBuf>,
        /// Run directory whose final accuracy is the full-data target.
        #[arg(long)]
        full_data_run: Option<PathBuf>,
        /// Explicit full-data target accuracy.
        #[arg(long)]
        full_data_acc: Option<f64>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.jobs > 0 {
        // Ignore failure: the global pool may already exist in tests.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global();
    }
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::Tapt { sweep_lr } => cmd_tapt(&cli, &cfg, sweep_lr.as_deref()),
        Command::Run { grid } => cmd_run(&cli, &cfg, grid),
        Command::Fewshot => cmd_fewshot(&cli, &cfg),
        Command::Report {
            dirs,
            full_data_run,
            full_data_acc,
        } => cmd_report(&cli, dirs, full_data_run.as_deref(), *full_data_acc),
    }
}

fn net_config(cfg: &RunConfig, bundle: &PoolBundle) -> NetConfig {
    NetConfig {
        vocab_size: bundle.vocab.size(),
        embed_dim: cfg.net.embed_dim,
        hidden_dim: cfg.net.hidden_dim,
        num_classes: bundle.pool.num_classes(),
        dropout: cfg.net.dropout,
        max_len: cfg.dataset.max_len,
    }
}

fn fmt_row(values: &[String]) -> String {
    values.join(",")
}

fn cmd_tapt(cli: &Cli, cfg: &RunConfig, sweep_lr: Option<&str>) -> Result<()> {
    let bundle = build_pool(&cfg.dataset, cli.seed)?;
    let netcfg = net_config(cfg, &bundle);
    let w0 = init_weights(&netcfg, cli.seed, None)?;
    let tapt_seed = crate::seed::derive(cli.seed, crate::seed::Stream::TaptVal, 0);

    std::fs::create_dir_all(&cli.out)?;
    write_atomic_str(&cli.out.join("config.txt"), &config_echo(cfg, cli.seed))?;

    let ckpt_path = cli.out.join("tapt.ckpt");
    match sweep_lr {
        Some(spec) => {
            let lrs: Vec<f64> = spec
                .split(',')
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|_| {
                        Error::InvalidArgument(format!("bad learning rate `{s}` in --sweep-lr"))
                    })
                })
                .collect::<Result<_>>()?;
            let (runs, best) = tapt_lr_sweep(&w0, &bundle.pool, &lrs, &cfg.tapt, tapt_seed)?;
            let mut lines = vec!["step,lr,val_loss".to_string()];
            for (lr, report) in &runs {
                for e in &report.evals {
                    lines.push(fmt_row(&[
                        e.step.to_string(),
                        lr.to_string(),
                        e.val_loss.to_string(),
                    ]));
                }
            }
            write_atomic_str(&cli.out.join("tapt_sweep.csv"), &(lines.join("\n") + "\n"))?;
            let best_lr = runs[best].0;
            write_atomic_str(
                &cli.out.join("tapt_best_lr.txt"),
                &format!("best_lr = {best_lr}\n"),
            )?;
            // Train the checkpoint at the winning rate.
            let best_cfg = crate::adapt::TaptConfig {
                learning_rate: best_lr,
                ..cfg.tapt.clone()
            };
            let (adapted, report) = run_tapt(&w0, &bundle.pool, &best_cfg, tapt_seed)?;
            save_checkpoint(&ckpt_path, &adapted, true)?;
            write_curve(&cli.out.join("tapt_curve.csv"), &report)?;
            println!(
                "adapted checkpoint written to {} (best lr {best_lr}, selected step {})",
                ckpt_path.display(),
                report.selected_step
            );
        }
        None => {
            let (adapted, report) = run_tapt(&w0, &bundle.pool, &cfg.tapt, tapt_seed)?;
            save_checkpoint(&ckpt_path, &adapted, true)?;
            write_curve(&cli.out.join("tapt_curve.csv"), &report)?;
            println!(
                "adapted checkpoint written to {} (selected step {}, val loss {:.4})",
                ckpt_path.display(),
                report.selected_step,
                report.selected_val_loss().unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}

fn write_curve(path: &Path, report: &crate::adapt::TaptReport) -> Result<()> {
    let mut lines = vec!["step,val_loss".to_string()];
    for e in &report.evals {
        lines.push(format!("{},{}", e.step, e.val_loss));
    }
    write_atomic_str(path, &(lines.join("\n") + "\n"))
}

fn config_echo(cfg: &RunConfig, seed: u64) -> String {
    format!("# master seed: {seed} (pass via --seed)\n{}", cfg.echo())
}

/// One grid axis: name and values.
fn parse_grid(specs: &[String]) -> Result<Vec<Vec<(String, String)>>> {
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    for spec in specs {
        let (axis, values) = spec.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("bad --grid spec `{spec}` (expected axis=v1,v2)"))
        })?;
        let axis = axis.trim().to_string();
        if !["strategy", "tapt", "acquisition"].contains(&axis.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "unknown grid axis `{axis}` (expected strategy, tapt, or acquisition)"
            )));
        }
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
        axes.push((axis, values));
    }
    // Cross product in input order.
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (axis, values) in axes {
        let mut next = Vec::new();
        for cell in &cells {
            for v in &values {
                let mut c = cell.clone();
                c.push((axis.clone(), v.clone()));
                next.push(c);
            }
        }
        cells = next;
    }
    Ok(cells)
}

fn apply_cell(cfg: &RunConfig, cell: &[(String, String)]) -> Result<RunConfig> {
    let mut out = cfg.clone();
    for (axis, value) in cell {
        match axis.as_str() {
            "strategy" => {
                out.train.policy = match value.as_str() {
                    "sft" => PolicyKind::Sft,
                    "ft+" | "ftplus" => PolicyKind::FtPlus,
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "grid strategy `{other}` is not sft|ft+"
                        )))
                    }
                }
            }
            "tapt" => {
                out.al.use_tapt = match value.as_str() {
                    "on" => true,
                    "off" => false,
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "grid tapt `{other}` is not on|off"
                        )))
                    }
                }
            }
            "acquisition" => out.al.acquisition = value.parse()?,
            _ => unreachable!("axis validated in parse_grid"),
        }
    }
    Ok(out)
}

fn cell_dir_name(cell: &[(String, String)]) -> String {
    cell.iter()
        .map(|(a, v)| format!("{a}-{v}"))
        .collect::<Vec<_>>()
        .join("_")
}

fn cmd_run(cli: &Cli, cfg: &RunConfig, grid: &[String]) -> Result<()> {
    let cells = parse_grid(grid)?;
    let single = cells.len() == 1 && cells[0].is_empty();
    for cell in &cells {
        let cell_cfg = apply_cell(cfg, cell)?;
        let dir = if single {
            cli.out.clone()
        } else {
            cli.out.join(cell_dir_name(cell))
        };
        run_one(cli, &cell_cfg, &dir)?;
    }
    Ok(())
}

fn run_one(cli: &Cli, cfg: &RunConfig, dir: &Path) -> Result<()> {
    let bundle = build_pool(&cfg.dataset, cli.seed)?;
    let netcfg = net_config(cfg, &bundle);
    let w0 = init_weights(&netcfg, cli.seed, None)?;

    let mut per_seed_tapt = None;
    let encoder: Weights = if cfg.al.use_tapt {
        if cfg.al.tapt_per_seed {
            per_seed_tapt = Some(cfg.tapt.clone());
            w0.clone()
        } else {
            let path = cfg.tapt_checkpoint.as_ref().ok_or_else(|| {
                Error::InvalidArgument(
                    "al.use_tapt = true needs tapt.checkpoint (run the tapt subcommand first)"
                        .to_string(),
                )
            })?;
            if !path.exists() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint {} not found (run the tapt subcommand first)",
                    path.display()
                )));
            }
            let (loaded, adapted) = load_checkpoint(path)?;
            if !adapted {
                return Err(Error::Checkpoint(format!(
                    "{}: checkpoint is not marked adapted",
                    path.display()
                )));
            }
            loaded
        }
    } else {
        w0.clone()
    };

    let pool_size = bundle.pool.pool_idx().len();
    let k = if cfg.al.k > 0 {
        cfg.al.k
    } else {
        ((cfg.dataset.k_frac * pool_size as f64).round() as usize).max(1)
    };
    let budget = if cfg.al.budget > 0 {
        cfg.al.budget
    } else {
        ((cfg.dataset.budget_frac * pool_size as f64).round() as usize).max(k)
    };
    let al_cfg = AlLoopConfig {
        policy: cfg.policy(),
        acquisition: cfg.al.acquisition,
        k,
        budget,
        iterations: cfg.al.iterations,
        acq: crate::acquire::AcquisitionConfig {
            n_passes: cfg.al.n_passes,
            batchbald: cfg.batchbald,
            alps_mask_fraction: 0.15,
            deterministic_scoring: cfg.al.deterministic_scoring,
            cluster_style: cfg.al.cluster_style,
            keep_scores: cfg.al.dump_scores,
            keep_rows: cfg.al.dump_embeddings,
        },
        ece_bins: cfg.al.ece_bins,
    };

    let result = run_experiment(
        &bundle.pool,
        &encoder,
        &al_cfg,
        &cfg.al.seeds,
        cli.seed,
        per_seed_tapt.as_ref(),
    )?;

    write_run_artifacts(dir, cli.seed, cfg, &bundle, &result)?;
    let last = result.aggregate.last().expect("at least one iteration");
    println!(
        "{}: {} iterations, final labeled {} ({:.1}%), median acc {:.4}",
        dir.display(),
        result.aggregate.len(),
        last.labeled_size,
        100.0 * last.labeled_frac,
        last.median_acc
    );
    Ok(())
}

const AGGREGATE_HEADER: &str = "iteration,labeled_size,labeled_frac,median_acc,std_acc,median_brier,std_brier,median_nll,std_nll,median_ece,std_ece,median_entropy,std_entropy,inference_s,selection_s,train_s";

fn write_run_artifacts(
    dir: &Path,
    master_seed: u64,
    cfg: &RunConfig,
    bundle: &PoolBundle,
    result: &RunResult,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic_str(&dir.join("config.txt"), &config_echo(cfg, master_seed))?;

    // Split manifest for exact replay.
    let pool = &bundle.pool;
    let mut split_lines = vec!["id,split".to_string()];
    let mut assignments: Vec<(usize, &str)> = Vec::with_capacity(pool.examples().len());
    for &id in pool.pool_idx().iter().chain(pool.lab_idx().iter()) {
        assignments.push((id, "pool"));
    }
    for &id in pool.val_idx() {
        assignments.push((id, "val"));
    }
    for &id in pool.test_idx() {
        assignments.push((id, "test"));
    }
    assignments.sort_unstable();
    for (id, split) in assignments {
        split_lines.push(format!("{id},{split}"));
    }
    write_atomic_str(&dir.join("splits.csv"), &(split_lines.join("\n") + "\n"))?;

    let mut label_lines = vec!["class_id,label".to_string()];
    for (i, name) in bundle.label_names.iter().enumerate() {
        label_lines.push(format!("{i},{name}"));
    }
    write_atomic_str(&dir.join("label_map.csv"), &(label_lines.join("\n") + "\n"))?;

    // Per-seed records.
    let mut rec_lines = vec![
        "seed,iteration,labeled_size,accuracy,brier,nll,ece,mean_entropy,inference_s,selection_s,train_s"
            .to_string(),
    ];
    for (seed, rounds) in result.seeds.iter().zip(&result.per_seed) {
        for round in rounds {
            let r = &round.record;
            rec_lines.push(fmt_row(&[
                seed.to_string(),
                r.iteration.to_string(),
                r.labeled_size.to_string(),
                r.report.accuracy.to_string(),
                r.report.brier.to_string(),
                r.report.nll.to_string(),
                r.report.ece.to_string(),
                r.report.mean_entropy.to_string(),
                r.inference_seconds.to_string(),
                r.selection_seconds.to_string(),
                r.train_seconds.to_string(),
            ]));
        }
    }
    write_atomic_str(&dir.join("records.csv"), &(rec_lines.join("\n") + "\n"))?;

    // Aggregate curve.
    let mut agg_lines = vec![AGGREGATE_HEADER.to_string()];
    for row in &result.aggregate {
        agg_lines.push(fmt_row(&[
            row.iteration.to_string(),
            row.labeled_size.to_string(),
            row.labeled_frac.to_string(),
            row.median_acc.to_string(),
            row.std_acc.to_string(),
            row.median_brier.to_string(),
            row.std_brier.to_string(),
            row.median_nll.to_string(),
            row.std_nll.to_string(),
            row.median_ece.to_string(),
            row.std_ece.to_string(),
            row.median_entropy.to_string(),
            row.std_entropy.to_string(),
            row.inference_s.to_string(),
            row.selection_s.to_string(),
            row.train_s.to_string(),
        ]));
    }
    write_atomic_str(&dir.join("aggregate.csv"), &(agg_lines.join("\n") + "\n"))?;

    // Timing table: medians over rounds that actually acquired.
    let mut inference = Vec::new();
    let mut selection = Vec::new();
    for rounds in &result.per_seed {
        for round in rounds.iter().filter(|r| r.acquired) {
            inference.push(round.record.inference_seconds);
            selection.push(round.record.selection_seconds);
        }
    }
    let record = crate::evalmetrics::TimingRecord {
        function: cfg.al.acquisition.to_string(),
        inference_seconds: if inference.is_empty() { 0.0 } else { median(&inference) },
        selection_seconds: if selection.is_empty() { 0.0 } else { median(&selection) },
    };
    let timing = format!(
        "function,inference_s,selection_s\n{},{},{}\n",
        record.function, record.inference_seconds, record.selection_seconds,
    );
    write_atomic_str(&dir.join("timing.csv"), &timing)?;

    // Fine-tuning log.
    let mut log_lines = vec!["seed,iteration,step,split,loss,accuracy".to_string()];
    for (seed, rounds) in result.seeds.iter().zip(&result.per_seed) {
        for round in rounds {
            for e in &round.train.evals {
                log_lines.push(format!(
                    "{seed},{},{},train,{},",
                    round.record.iteration, e.step, e.train_loss
                ));
                log_lines.push(format!(
                    "{seed},{},{},val,{},{}",
                    round.record.iteration, e.step, e.val_loss, e.val_accuracy
                ));
            }
        }
    }
    write_atomic_str(&dir.join("train_log.csv"), &(log_lines.join("\n") + "\n"))?;

    // Optional score dumps.
    if cfg.al.dump_scores {
        for (seed, rounds) in result.seeds.iter().zip(&result.per_seed) {
            for round in rounds {
                if let Some(scores) = &round.scores {
                    let mut ranked: Vec<(usize, f64)> = scores.clone();
                    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                    let mut lines = vec!["id,score,rank".to_string()];
                    for (rank, (id, score)) in ranked.iter().enumerate() {
                        lines.push(format!("{id},{score},{}", rank + 1));
                    }
                    let name = format!("scores_seed{seed}_iter{}.csv", round.record.iteration);
                    write_atomic_str(&dir.join(name), &(lines.join("\n") + "\n"))?;
                }
            }
        }
    }

    // Optional embedding dumps: kind u32, rows u32, cols u32, then f64 LE.
    if cfg.al.dump_embeddings {
        let kind: u32 = match cfg.al.acquisition {
            AcquisitionFn::Badge => 0,
            AcquisitionFn::Alps => 1,
            _ => 2,
        };
        for (seed, rounds) in result.seeds.iter().zip(&result.per_seed) {
            for round in rounds {
                if let Some(rows) = &round.embedding_rows {
                    let cols = rows.first().map_or(0, |r| r.len());
                    let mut buf = Vec::with_capacity(12 + rows.len() * cols * 8);
                    buf.extend_from_slice(&kind.to_le_bytes());
                    buf.extend_from_slice(&(rows.len() as u32).to_le_bytes());
                    buf.extend_from_slice(&(cols as u32).to_le_bytes());
                    for row in rows {
                        for v in row {
                            buf.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                    let name = format!("emb_seed{seed}_iter{}.bin", round.record.iteration);
                    crate::runio::write_atomic(&dir.join(name), &buf)?;
                }
            }
        }
    }
    Ok(())
}

fn cmd_fewshot(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let bundle = build_pool(&cfg.dataset, cli.seed)?;
    let netcfg = net_config(cfg, &bundle);
    let w0 = init_weights(&netcfg, cli.seed, None)?;
    // Standard fixed-epoch fine-tuning; the epoch count varies per cell.
    let template =
        crate::trainer::TrainPolicy::sft(cfg.train.learning_rate, cfg.train.batch_size);
    let records = epoch_sweep(
        &w0,
        &bundle.pool,
        &cfg.fewshot.sizes,
        &cfg.fewshot.epochs,
        &cfg.fewshot.seeds,
        &template,
    )?;
    std::fs::create_dir_all(&cli.out)?;
    write_atomic_str(&cli.out.join("config.txt"), &config_echo(cfg, cli.seed))?;
    let mut lines = vec!["size,epochs,seed,test_acc".to_string()];
    for r in &records {
        lines.push(format!("{},{},{},{}", r.size, r.epochs, r.seed, r.test_acc));
    }
    write_atomic_str(&cli.out.join("fewshot.csv"), &(lines.join("\n") + "\n"))?;
    println!("{} sweep cells written to {}", records.len(), cli.out.display());
    Ok(())
}

fn parse_aggregate_csv(path: &Path) -> Result<Vec<AggregateRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != AGGREGATE_HEADER {
        return Err(Error::SchemaMismatch {
            file: path.display().to_string(),
            msg: format!("unexpected header `{header}`"),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 16 {
            return Err(Error::SchemaMismatch {
                file: path.display().to_string(),
                msg: format!("row {} has {} fields, expected 16", i + 2, fields.len()),
            });
        }
        let f = |j: usize| -> Result<f64> {
            fields[j].parse().map_err(|_| Error::SchemaMismatch {
                file: path.display().to_string(),
                msg: format!("row {}: bad number `{}`", i + 2, fields[j]),
            })
        };
        rows.push(AggregateRow {
            iteration: f(0)? as usize,
            labeled_size: f(1)? as usize,
            labeled_frac: f(2)?,
            median_acc: f(3)?,
            std_acc: f(4)?,
            median_brier: f(5)?,
            std_brier: f(6)?,
            median_nll: f(7)?,
            std_nll: f(8)?,
            median_ece: f(9)?,
            std_ece: f(10)?,
            median_entropy: f(11)?,
            std_entropy: f(12)?,
            inference_s: f(13)?,
            selection_s: f(14)?,
            train_s: f(15)?,
        });
    }
    Ok(rows)
}

fn cmd_report(
    cli: &Cli,
    dirs: &[PathBuf],
    full_data_run: Option<&Path>,
    full_data_acc: Option<f64>,
) -> Result<()> {
    if dirs.is_empty() {
        return Err(Error::InvalidArgument(
            "report needs at least one run directory".to_string(),
        ));
    }
    let mut runs: Vec<(String, Vec<AggregateRow>)> = Vec::new();
    for dir in dirs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        runs.push((name, parse_aggregate_csv(&dir.join("aggregate.csv"))?));
    }
    std::fs::create_dir_all(&cli.out)?;

    // Comparison table over the iterations shared by all runs.
    let common = runs.iter().map(|(_, r)| r.len()).min().unwrap_or(0);
    let mut header = vec!["iteration".to_string(), "labeled_frac".to_string()];
    for (name, _) in &runs {
        header.push(format!("median_acc_{name}"));
    }
    for (name, _) in runs.iter().skip(1) {
        header.push(format!("delta_{name}"));
    }
    let mut lines = vec![header.join(",")];
    for i in 0..common {
        let mut row = vec![
            runs[0].1[i].iteration.to_string(),
            runs[0].1[i].labeled_frac.to_string(),
        ];
        for (_, rows) in &runs {
            row.push(rows[i].median_acc.to_string());
        }
        for (_, rows) in runs.iter().skip(1) {
            row.push((rows[i].median_acc - runs[0].1[i].median_acc).to_string());
        }
        lines.push(row.join(","));
    }
    write_atomic_str(&cli.out.join("comparison.csv"), &(lines.join("\n") + "\n"))?;

    // Timing summary: one inference/selection pair per run.
    let mut timing_lines = vec!["run,function,inference_s,selection_s".to_string()];
    for dir in dirs {
        let path = dir.join("timing.csv");
        let text = std::fs::read_to_string(&path)?;
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            timing_lines.push(format!("{name},{line}"));
        }
    }
    write_atomic_str(
        &cli.out.join("timing_summary.csv"),
        &(timing_lines.join("\n") + "\n"),
    )?;

    // Data efficiency against the full-data target, when one is given.
    let target = match (full_data_acc, full_data_run) {
        (Some(acc), _) => Some(acc),
        (None, Some(dir)) => {
            let rows = parse_aggregate_csv(&dir.join("aggregate.csv"))?;
            rows.last().map(|r| r.median_acc)
        }
        (None, None) => None,
    };
    if let Some(target) = target {
        let mut eff_lines = vec!["run,target_accuracy,labeled_frac".to_string()];
        for (name, rows) in &runs {
            let frac = data_efficiency(rows, target)
                .map(|f| f.to_string())
                .unwrap_or_else(|| "none".to_string());
            eff_lines.push(format!("{name},{target},{frac}"));
        }
        write_atomic_str(&cli.out.join("efficiency.csv"), &(eff_lines.join("\n") + "\n"))?;
    }
    println!("report written to {}", cli.out.display());
    Ok(())
}
