//! Run configuration: a flat `key = value` text format with dotted
//! sections (dataset.*, net.*, tapt.*, train.*, al.*, batchbald.*,
//! fewshot.*).
//!
//! Keys apply in file order, so a `dataset.preset` line can be refined by
//! later lines. Unknown keys are hard errors; a typo never silently falls
//! back to a default. `echo()` renders the resolved configuration in a
//! form that parses back identically, which is what run directories store
//! for replay.

use std::path::PathBuf;

use crate::acquire::{AcquisitionFn, BatchBaldConfig};
use crate::adapt::TaptConfig;
use crate::corpus::{DataSource, DatasetSpec, FileFormat};
use crate::error::{Error, Result};
use crate::trainer::PolicyKind;

/// Model-size settings (vocabulary size comes from the data).
#[derive(Debug, Clone, PartialEq)]
pub struct NetSettings {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
}

/// Fine-tuning settings shared by both policies.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub policy: PolicyKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// 0 disables patience-based aborts.
    pub patience: usize,
}

/// Active-learning loop settings.
#[derive(Debug, Clone)]
pub struct AlSettings {
    pub acquisition: AcquisitionFn,
    pub use_tapt: bool,
    /// Absolute acquisition size; 0 derives it from `dataset.k_frac`.
    pub k: usize,
    /// Absolute label budget; 0 derives it from `dataset.budget_frac`.
    pub budget: usize,
    pub iterations: usize,
    pub n_passes: usize,
    pub seeds: Vec<u64>,
    pub tapt_per_seed: bool,
    pub dump_scores: bool,
    pub dump_embeddings: bool,
    pub ece_bins: usize,
    pub deterministic_scoring: bool,
    pub cluster_style: crate::acquire::ClusterStyle,
}

/// Few-shot sweep settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FewshotSettings {
    pub sizes: Vec<usize>,
    pub epochs: Vec<usize>,
    pub seeds: Vec<u64>,
}

/// The full resolved configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub net: NetSettings,
    pub tapt: TaptConfig,
    pub tapt_checkpoint: Option<PathBuf>,
    pub train: TrainSettings,
    pub al: AlSettings,
    pub batchbald: BatchBaldConfig,
    pub fewshot: FewshotSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec {
                name: "synthetic".to_string(),
                source: DataSource::Synthetic {
                    n: 2000,
                    classes: 6,
                    vocab_size: 300,
                    noise: 0.3,
                },
                k_frac: 0.01,
                budget_frac: 0.15,
                val_frac: 0.1,
                test_frac: 0.1,
                min_count: 1,
                max_len: 128,
            },
            net: NetSettings {
                embed_dim: 32,
                hidden_dim: 32,
                dropout: 0.1,
            },
            tapt: TaptConfig::default(),
            tapt_checkpoint: None,
            train: TrainSettings {
                policy: PolicyKind::FtPlus,
                learning_rate: 0.05,
                batch_size: 16,
                weight_decay: 0.0,
                patience: 0,
            },
            al: AlSettings {
                acquisition: AcquisitionFn::Entropy,
                use_tapt: false,
                k: 0,
                budget: 0,
                iterations: 10,
                n_passes: 10,
                seeds: vec![1, 2, 3, 4, 5],
                tapt_per_seed: false,
                dump_scores: false,
                dump_embeddings: false,
                ece_bins: 10,
                deterministic_scoring: false,
                cluster_style: crate::acquire::ClusterStyle::PerFunction,
            },
            batchbald: BatchBaldConfig::default(),
            fewshot: FewshotSettings {
                sizes: vec![100, 1000],
                epochs: vec![3, 10, 20],
                seeds: (1..=10).collect(),
            },
        }
    }
}

fn bad_value(key: &str, msg: impl Into<String>) -> Error {
    Error::ConfigValue {
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| bad_value(key, format!("`{v}` is not an integer")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| bad_value(key, format!("`{v}` is not an integer")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| bad_value(key, format!("`{v}` is not a number")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(bad_value(key, format!("`{v}` is not a boolean"))),
    }
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| parse_usize(key, s.trim()))
        .collect()
}

fn parse_u64_list(key: &str, v: &str) -> Result<Vec<u64>> {
    v.split(',').map(|s| parse_u64(key, s.trim())).collect()
}

impl RunConfig {
    /// Parses the key/value text, applying lines in order on top of the
    /// defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigValue {
                key: format!("line {}", i + 1),
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Loads and parses a config file.
    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    /// Applies one key. Presets expand immediately; later keys override.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset.name" => self.dataset.name = value.to_string(),
            "dataset.kind" => match value {
                "synthetic" => {
                    if !matches!(self.dataset.source, DataSource::Synthetic { .. }) {
                        self.dataset.source = DataSource::Synthetic {
                            n: 2000,
                            classes: 6,
                            vocab_size: 300,
                            noise: 0.3,
                        };
                    }
                }
                "file" => {
                    if !matches!(self.dataset.source, DataSource::File { .. }) {
                        self.dataset.source = DataSource::File {
                            path: PathBuf::new(),
                            format: FileFormat::Csv,
                        };
                    }
                }
                other => return Err(bad_value(key, format!("`{other}` is not synthetic|file"))),
            },
            "dataset.path" => match &mut self.dataset.source {
                DataSource::File { path, .. } => *path = PathBuf::from(value),
                _ => {
                    self.dataset.source = DataSource::File {
                        path: PathBuf::from(value),
                        format: FileFormat::Csv,
                    }
                }
            },
            "dataset.format" => {
                let fmt: FileFormat = value.parse()?;
                match &mut self.dataset.source {
                    DataSource::File { format, .. } => *format = fmt,
                    _ => {
                        self.dataset.source = DataSource::File {
                            path: PathBuf::new(),
                            format: fmt,
                        }
                    }
                }
            }
            "dataset.n" => {
                let v = parse_usize(key, value)?;
                *self.synth_mut(key)?.0 = v;
            }
            "dataset.classes" => {
                let v = parse_usize(key, value)?;
                *self.synth_mut(key)?.1 = v;
            }
            "dataset.vocab_size" => {
                let v = parse_usize(key, value)?;
                *self.synth_mut(key)?.2 = v;
            }
            "dataset.noise" => {
                let v = parse_f64(key, value)?;
                *self.synth_mut(key)?.3 = v;
            }
            "dataset.preset" => match value {
                "trec6-shaped" => {
                    if let DataSource::Synthetic { classes, .. } = &mut self.dataset.source {
                        *classes = 6;
                    }
                    self.dataset.name = "trec6-shaped".to_string();
                    self.dataset.k_frac = 0.01;
                    self.dataset.budget_frac = 0.15;
                }
                "agnews-shaped" => {
                    if let DataSource::Synthetic { classes, .. } = &mut self.dataset.source {
                        *classes = 4;
                    }
                    self.dataset.name = "agnews-shaped".to_string();
                    self.dataset.k_frac = 0.005;
                    self.dataset.budget_frac = 0.15;
                    self.dataset.val_frac = 0.05;
                }
                other => return Err(bad_value(key, format!("unknown preset `{other}`"))),
            },
            "dataset.k_frac" => self.dataset.k_frac = parse_f64(key, value)?,
            "dataset.budget_frac" => self.dataset.budget_frac = parse_f64(key, value)?,
            "dataset.val_frac" => self.dataset.val_frac = parse_f64(key, value)?,
            "dataset.test_frac" => self.dataset.test_frac = parse_f64(key, value)?,
            "dataset.min_count" => self.dataset.min_count = parse_usize(key, value)?,
            "dataset.max_len" => self.dataset.max_len = parse_usize(key, value)?,

            "net.embed_dim" => self.net.embed_dim = parse_usize(key, value)?,
            "net.hidden_dim" => self.net.hidden_dim = parse_usize(key, value)?,
            "net.dropout" => self.net.dropout = parse_f64(key, value)?,

            "tapt.max_steps" => self.tapt.max_steps = parse_usize(key, value)?,
            "tapt.eval_every" => self.tapt.eval_every_steps = parse_usize(key, value)?,
            "tapt.mask_fraction" => self.tapt.mask_fraction = parse_f64(key, value)?,
            "tapt.learning_rate" => self.tapt.learning_rate = parse_f64(key, value)?,
            "tapt.batch_size" => self.tapt.batch_size = parse_usize(key, value)?,
            "tapt.val_fraction" => self.tapt.val_fraction = parse_f64(key, value)?,
            "tapt.mask_replace_prob" => self.tapt.mask_replace_prob = parse_f64(key, value)?,
            "tapt.checkpoint" => self.tapt_checkpoint = Some(PathBuf::from(value)),

            "train.policy" => {
                self.train.policy = match value {
                    "sft" => PolicyKind::Sft,
                    "ft+" | "ftplus" => PolicyKind::FtPlus,
                    other => return Err(bad_value(key, format!("`{other}` is not sft|ft+"))),
                }
            }
            "train.learning_rate" => self.train.learning_rate = parse_f64(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_usize(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse_f64(key, value)?,
            "train.patience" => self.train.patience = parse_usize(key, value)?,

            "al.acquisition" => self.al.acquisition = value.parse()?,
            "al.use_tapt" => self.al.use_tapt = parse_bool(key, value)?,
            "al.k" => self.al.k = parse_usize(key, value)?,
            "al.budget" => self.al.budget = parse_usize(key, value)?,
            "al.iterations" => self.al.iterations = parse_usize(key, value)?,
            "al.n_passes" => self.al.n_passes = parse_usize(key, value)?,
            "al.seeds" => self.al.seeds = parse_u64_list(key, value)?,
            "al.tapt_per_seed" => self.al.tapt_per_seed = parse_bool(key, value)?,
            "al.dump_scores" => self.al.dump_scores = parse_bool(key, value)?,
            "al.dump_embeddings" => self.al.dump_embeddings = parse_bool(key, value)?,
            "al.ece_bins" => self.al.ece_bins = parse_usize(key, value)?,
            "al.deterministic_scoring" => {
                self.al.deterministic_scoring = parse_bool(key, value)?
            }
            "al.cluster_style" => self.al.cluster_style = value.parse()?,

            "batchbald.max_exact_configs" => {
                self.batchbald.max_exact_configs = parse_usize(key, value)?
            }
            "batchbald.n_joint_samples" => {
                self.batchbald.n_joint_samples = parse_usize(key, value)?
            }

            "fewshot.sizes" => self.fewshot.sizes = parse_usize_list(key, value)?,
            "fewshot.epochs" => self.fewshot.epochs = parse_usize_list(key, value)?,
            "fewshot.seeds" => self.fewshot.seeds = parse_u64_list(key, value)?,

            other => return Err(Error::UnknownConfigKey(other.to_string())),
        }
        Ok(())
    }

    fn synth_mut(
        &mut self,
        key: &str,
    ) -> Result<(&mut usize, &mut usize, &mut usize, &mut f64)> {
        match &mut self.dataset.source {
            DataSource::Synthetic {
                n,
                classes,
                vocab_size,
                noise,
            } => Ok((n, classes, vocab_size, noise)),
            _ => Err(bad_value(key, "dataset.kind is not synthetic")),
        }
    }

    /// Renders the resolved configuration; `parse(echo())` reproduces it.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("dataset.name", self.dataset.name.clone());
        match &self.dataset.source {
            DataSource::Synthetic {
                n,
                classes,
                vocab_size,
                noise,
            } => {
                push("dataset.kind", "synthetic".to_string());
                push("dataset.n", n.to_string());
                push("dataset.classes", classes.to_string());
                push("dataset.vocab_size", vocab_size.to_string());
                push("dataset.noise", noise.to_string());
            }
            DataSource::File { path, format } => {
                push("dataset.kind", "file".to_string());
                push("dataset.path", path.display().to_string());
                let fmt = match format {
                    FileFormat::Csv => "csv",
                    FileFormat::Tsv => "tsv",
                    FileFormat::Jsonl => "jsonl",
                };
                push("dataset.format", fmt.to_string());
            }
        }
        push("dataset.k_frac", self.dataset.k_frac.to_string());
        push("dataset.budget_frac", self.dataset.budget_frac.to_string());
        push("dataset.val_frac", self.dataset.val_frac.to_string());
        push("dataset.test_frac", self.dataset.test_frac.to_string());
        push("dataset.min_count", self.dataset.min_count.to_string());
        push("dataset.max_len", self.dataset.max_len.to_string());
        push("net.embed_dim", self.net.embed_dim.to_string());
        push("net.hidden_dim", self.net.hidden_dim.to_string());
        push("net.dropout", self.net.dropout.to_string());
        push("tapt.max_steps", self.tapt.max_steps.to_string());
        push("tapt.eval_every", self.tapt.eval_every_steps.to_string());
        push("tapt.mask_fraction", self.tapt.mask_fraction.to_string());
        push("tapt.learning_rate", self.tapt.learning_rate.to_string());
        push("tapt.batch_size", self.tapt.batch_size.to_string());
        push("tapt.val_fraction", self.tapt.val_fraction.to_string());
        push(
            "tapt.mask_replace_prob",
            self.tapt.mask_replace_prob.to_string(),
        );
        if let Some(p) = &self.tapt_checkpoint {
            push("tapt.checkpoint", p.display().to_string());
        }
        push("train.policy", self.train.policy.to_string());
        push("train.learning_rate", self.train.learning_rate.to_string());
        push("train.batch_size", self.train.batch_size.to_string());
        push("train.weight_decay", self.train.weight_decay.to_string());
        push("train.patience", self.train.patience.to_string());
        push("al.acquisition", self.al.acquisition.to_string());
        push("al.use_tapt", self.al.use_tapt.to_string());
        push("al.k", self.al.k.to_string());
        push("al.budget", self.al.budget.to_string());
        push("al.iterations", self.al.iterations.to_string());
        push("al.n_passes", self.al.n_passes.to_string());
        push(
            "al.seeds",
            self.al
                .seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        push("al.tapt_per_seed", self.al.tapt_per_seed.to_string());
        push("al.dump_scores", self.al.dump_scores.to_string());
        push("al.dump_embeddings", self.al.dump_embeddings.to_string());
        push("al.ece_bins", self.al.ece_bins.to_string());
        push(
            "al.deterministic_scoring",
            self.al.deterministic_scoring.to_string(),
        );
        push("al.cluster_style", self.al.cluster_style.to_string());
        push(
            "batchbald.max_exact_configs",
            self.batchbald.max_exact_configs.to_string(),
        );
        push(
            "batchbald.n_joint_samples",
            self.batchbald.n_joint_samples.to_string(),
        );
        push(
            "fewshot.sizes",
            self.fewshot
                .sizes
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        push(
            "fewshot.epochs",
            self.fewshot
                .epochs
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        push(
            "fewshot.seeds",
            self.fewshot
                .seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        out
    }

    /// The fine-tuning policy encoded by the train settings.
    pub fn policy(&self) -> crate::trainer::TrainPolicy {
        let mut p = match self.train.policy {
            PolicyKind::Sft => {
                crate::trainer::TrainPolicy::sft(self.train.learning_rate, self.train.batch_size)
            }
            PolicyKind::FtPlus => crate::trainer::TrainPolicy::ft_plus(
                self.train.learning_rate,
                self.train.batch_size,
            ),
        };
        p.weight_decay = self.train.weight_decay;
        p.patience = (self.train.patience > 0).then_some(self.train.patience);
        p
    }
}
