//! Dataset ingestion, tokenization, deterministic splits, and pool
//! bookkeeping.
//!
//! The pool tracks four disjoint index sets: actively labeled (`lab`),
//! unlabeled candidates (`pool`), validation, and test. Ground-truth labels
//! are read only through [`Pool::label_of`], which counts every access so a
//! run can prove that pretext adaptation never touched a label.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

/// One document: stable id, token ids under some vocabulary, an optional
/// gold label, and the original text (kept for reporting and re-tokenizing).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: usize,
    pub tokens: Vec<u32>,
    label: Option<usize>,
    pub raw_text: String,
}

impl Example {
    pub fn new(id: usize, tokens: Vec<u32>, label: Option<usize>, raw_text: String) -> Self {
        Self {
            id,
            tokens,
            label,
            raw_text,
        }
    }

    pub fn has_label(&self) -> bool {
        self.label.is_some()
    }
}

/// Token vocabulary with reserved special ids.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const MASK: u32 = 2;

    /// Builds a vocabulary from example texts: whitespace-split lowercased
    /// tokens with count >= `min_count` get dense ids in first-appearance
    /// order; everything else maps to UNK.
    pub fn build(examples: &[Example], min_count: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for ex in examples {
            for tok in ex.raw_text.to_lowercase().split_whitespace() {
                *counts.entry(tok.to_string()).or_insert(0) += 1;
            }
        }
        let mut id_to_token = vec!["<pad>".to_string(), "<unk>".to_string(), "<mask>".to_string()];
        let mut token_to_id = HashMap::new();
        for ex in examples {
            for tok in ex.raw_text.to_lowercase().split_whitespace() {
                if counts[tok] >= min_count && !token_to_id.contains_key(tok) {
                    token_to_id.insert(tok.to_string(), id_to_token.len() as u32);
                    id_to_token.push(tok.to_string());
                }
            }
        }
        Self {
            token_to_id,
            id_to_token,
        }
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    /// Tokenizes text: lowercase, whitespace split, unknown -> UNK,
    /// truncated to `max_len`. Empty text yields a single UNK token.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = text
            .to_lowercase()
            .split_whitespace()
            .take(max_len)
            .map(|tok| self.token_to_id.get(tok).copied().unwrap_or(Self::UNK))
            .collect();
        if ids.is_empty() {
            ids.push(Self::UNK);
        }
        ids
    }
}

/// Fills in `tokens` for every example under the given vocabulary.
pub fn tokenize_examples(examples: &mut [Example], vocab: &Vocab, max_len: usize) {
    for ex in examples.iter_mut() {
        ex.tokens = vocab.tokenize(&ex.raw_text, max_len);
    }
}

/// Supported input file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Csv,
    Tsv,
    Jsonl,
}

impl std::str::FromStr for FileFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(FileFormat::Csv),
            "tsv" => Ok(FileFormat::Tsv),
            "jsonl" => Ok(FileFormat::Jsonl),
            other => Err(Error::InvalidArgument(format!(
                "unknown file format `{other}` (expected csv, tsv, or jsonl)"
            ))),
        }
    }
}

/// A loaded dataset: examples in file order plus the label-string mapping
/// (dense class ids assigned in first-appearance order).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
    pub label_names: Vec<String>,
}

/// Loads a dataset from disk. Examples come back untokenized (`tokens`
/// empty); call [`tokenize_examples`] after building a [`Vocab`].
pub fn load_dataset(path: &Path, format: FileFormat) -> Result<Dataset> {
    let mut label_map: HashMap<String, usize> = HashMap::new();
    let mut label_names: Vec<String> = Vec::new();
    let mut intern = |name: &str| -> usize {
        if let Some(&id) = label_map.get(name) {
            id
        } else {
            let id = label_names.len();
            label_map.insert(name.to_string(), id);
            label_names.push(name.to_string());
            id
        }
    };

    let path_str = path.display().to_string();
    let mut examples = Vec::new();

    match format {
        FileFormat::Csv | FileFormat::Tsv => {
            let delim = if format == FileFormat::Csv { b',' } else { b'\t' };
            let mut rdr = csv::ReaderBuilder::new()
                .delimiter(delim)
                .flexible(true)
                .from_path(path)?;
            let headers = rdr.headers().map_err(|e| Error::MalformedRecord {
                path: path_str.clone(),
                line: 1,
                msg: e.to_string(),
            })?;
            let text_col = headers.iter().position(|h| h == "text").ok_or_else(|| {
                Error::MalformedRecord {
                    path: path_str.clone(),
                    line: 1,
                    msg: "missing `text` column in header".to_string(),
                }
            })?;
            let label_col = headers.iter().position(|h| h == "label");
            for (i, record) in rdr.records().enumerate() {
                let line = i + 2; // 1-based, after header
                let record = record.map_err(|e| Error::MalformedRecord {
                    path: path_str.clone(),
                    line,
                    msg: e.to_string(),
                })?;
                let text = record.get(text_col).ok_or_else(|| Error::MalformedRecord {
                    path: path_str.clone(),
                    line,
                    msg: "missing `text` field".to_string(),
                })?;
                let label = match label_col {
                    Some(c) => record
                        .get(c)
                        .filter(|s| !s.is_empty())
                        .map(&mut intern),
                    None => None,
                };
                examples.push(Example::new(examples.len(), Vec::new(), label, text.to_string()));
            }
        }
        FileFormat::Jsonl => {
            let file = std::fs::File::open(path)?;
            for (i, line_res) in BufReader::new(file).lines().enumerate() {
                let line_no = i + 1;
                let line = line_res?;
                if line.trim().is_empty() {
                    continue;
                }
                let value: serde_json::Value =
                    serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                        path: path_str.clone(),
                        line: line_no,
                        msg: e.to_string(),
                    })?;
                let text = value
                    .get("text")
                    .and_then(|v| v.as_str())
                    .ok_or_else(|| Error::MalformedRecord {
                        path: path_str.clone(),
                        line: line_no,
                        msg: "missing string field `text`".to_string(),
                    })?;
                let label = match value.get("label") {
                    None | Some(serde_json::Value::Null) => None,
                    Some(serde_json::Value::String(s)) => Some(intern(s)),
                    Some(serde_json::Value::Number(n)) => Some(intern(&n.to_string())),
                    Some(other) => {
                        return Err(Error::MalformedRecord {
                            path: path_str.clone(),
                            line: line_no,
                            msg: format!("label must be string or integer, got {other}"),
                        })
                    }
                };
                examples.push(Example::new(examples.len(), Vec::new(), label, text.to_string()));
            }
        }
    }

    if examples.is_empty() {
        return Err(Error::EmptyDataset(path_str));
    }
    Ok(Dataset {
        num_classes: label_names.len(),
        examples,
        label_names,
    })
}

/// Generates a synthetic classification corpus. Each class owns a disjoint
/// set of "signal" words; a document mixes its class's signal words
/// (fraction `1 - noise`) with shared background words (fraction `noise`).
/// At `noise = 0` classes are perfectly separable from token counts; at
/// `noise = 1` all class-conditional token distributions coincide.
pub fn synth_generate(
    n: usize,
    num_classes: usize,
    vocab_size: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<Example>> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic corpus needs at least 2 classes, got {num_classes}"
        )));
    }
    if vocab_size < num_classes * 10 {
        return Err(Error::InvalidArgument(format!(
            "vocab_size {vocab_size} too small for {num_classes} classes (need >= {})",
            num_classes * 10
        )));
    }
    if n < num_classes {
        return Err(Error::InvalidArgument(format!(
            "cannot cover {num_classes} classes with only {n} examples"
        )));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::InvalidArgument(format!(
            "noise must be in [0,1], got {noise}"
        )));
    }

    let background = vocab_size / 2;
    let per_class = (vocab_size - background) / num_classes;
    let mut rng = seed::rng(seed);
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        let len = rng.random_range(8..=24);
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            let w = if rng.random::<f64>() < noise {
                rng.random_range(0..background)
            } else {
                background + class * per_class + rng.random_range(0..per_class)
            };
            words.push(format!("w{w}"));
        }
        examples.push(Example::new(i, Vec::new(), Some(class), words.join(" ")));
    }
    Ok(examples)
}

/// Returns the per-class signal word sets used by [`synth_generate`] with
/// the same parameters. Exposed so tests can check support disjointness.
pub fn synth_signal_words(num_classes: usize, vocab_size: usize) -> Vec<BTreeSet<String>> {
    let background = vocab_size / 2;
    let per_class = (vocab_size - background) / num_classes;
    (0..num_classes)
        .map(|c| {
            (0..per_class)
                .map(|j| format!("w{}", background + c * per_class + j))
                .collect()
        })
        .collect()
}

/// The partitioned dataset: all examples plus four disjoint index sets.
///
/// Labels are read exclusively through [`Pool::label_of`]; the access
/// counter is the audit hook proving pretext adaptation is label-blind.
#[derive(Debug)]
pub struct Pool {
    examples: Vec<Example>,
    num_classes: usize,
    lab: BTreeSet<usize>,
    pool: BTreeSet<usize>,
    val: BTreeSet<usize>,
    test: BTreeSet<usize>,
    label_reads: Arc<AtomicU64>,
}

impl Clone for Pool {
    fn clone(&self) -> Self {
        // A clone is an independent run; it gets its own access counter.
        Self {
            examples: self.examples.clone(),
            num_classes: self.num_classes,
            lab: self.lab.clone(),
            pool: self.pool.clone(),
            val: self.val.clone(),
            test: self.test.clone(),
            label_reads: Arc::new(AtomicU64::new(0)),
        }
    }
}

impl Pool {
    pub fn new(
        examples: Vec<Example>,
        num_classes: usize,
        pool: BTreeSet<usize>,
        val: BTreeSet<usize>,
        test: BTreeSet<usize>,
    ) -> Result<Self> {
        let p = Self {
            examples,
            num_classes,
            lab: BTreeSet::new(),
            pool,
            val,
            test,
            label_reads: Arc::new(AtomicU64::new(0)),
        };
        p.verify_partition()?;
        Ok(p)
    }

    /// Checks that lab/pool/val/test are pairwise disjoint and cover every
    /// example id exactly once.
    pub fn verify_partition(&self) -> Result<()> {
        let mut seen = vec![0u8; self.examples.len()];
        for (name, set) in [
            ("lab", &self.lab),
            ("pool", &self.pool),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            for &id in set {
                if id >= self.examples.len() {
                    return Err(Error::PoolInvariant(format!(
                        "{name} contains out-of-range id {id}"
                    )));
                }
                seen[id] += 1;
            }
        }
        if let Some(id) = seen.iter().position(|&c| c != 1) {
            return Err(Error::PoolInvariant(format!(
                "example {id} appears in {} split sets (expected exactly 1)",
                seen[id]
            )));
        }
        Ok(())
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn example(&self, id: usize) -> &Example {
        &self.examples[id]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn lab_idx(&self) -> &BTreeSet<usize> {
        &self.lab
    }

    pub fn pool_idx(&self) -> &BTreeSet<usize> {
        &self.pool
    }

    pub fn val_idx(&self) -> &BTreeSet<usize> {
        &self.val
    }

    pub fn test_idx(&self) -> &BTreeSet<usize> {
        &self.test
    }

    /// The gold label of an example. Every call is counted; the counter is
    /// how label-blindness of pretext training is audited.
    pub fn label_of(&self, id: usize) -> Option<usize> {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.examples.get(id).and_then(|ex| ex.label)
    }

    pub fn label_reads(&self) -> u64 {
        self.label_reads.load(Ordering::Relaxed)
    }

    pub fn reset_label_reads(&self) {
        self.label_reads.store(0, Ordering::Relaxed);
    }

    /// Moves `indices` from the unlabeled pool to the labeled set (the
    /// simulated annotation oracle).
    pub fn label(&mut self, indices: &[usize]) -> Result<()> {
        let mut batch = BTreeSet::new();
        for &id in indices {
            if !batch.insert(id) {
                return Err(Error::PoolInvariant(format!(
                    "duplicate index {id} in acquisition batch"
                )));
            }
            if self.lab.contains(&id) {
                return Err(Error::PoolInvariant(format!("index {id} already labeled")));
            }
            if !self.pool.contains(&id) {
                return Err(Error::PoolInvariant(format!(
                    "index {id} is not in the unlabeled pool"
                )));
            }
        }
        for id in batch {
            self.pool.remove(&id);
            self.lab.insert(id);
        }
        Ok(())
    }
}

/// How a dataset is obtained.
#[derive(Debug, Clone)]
pub enum DataSource {
    File {
        path: std::path::PathBuf,
        format: FileFormat,
    },
    Synthetic {
        n: usize,
        classes: usize,
        vocab_size: usize,
        noise: f64,
    },
}

/// Everything needed to set up one active-learning problem.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub name: String,
    pub source: DataSource,
    pub k_frac: f64,
    pub budget_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub min_count: usize,
    pub max_len: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_frac > 0.0 && self.k_frac <= self.budget_frac && self.budget_frac <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < k_frac <= budget_frac <= 1, got k_frac={} budget_frac={}",
                self.k_frac, self.budget_frac
            )));
        }
        if self.val_frac < 0.0 || self.test_frac < 0.0 || self.val_frac + self.test_frac >= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "val_frac + test_frac must be in [0, 1), got {} + {}",
                self.val_frac, self.test_frac
            )));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Deterministically partitions examples into pool/val/test (labeled set
/// starts empty). Fractions are of the total corpus, carved by floor.
pub fn make_splits(
    examples: Vec<Example>,
    num_classes: usize,
    val_frac: f64,
    test_frac: f64,
    seed: u64,
) -> Result<Pool> {
    if val_frac < 0.0 || test_frac < 0.0 || val_frac + test_frac >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must satisfy val + test < 1, got {val_frac} + {test_frac}"
        )));
    }
    let n = examples.len();
    let n_val = (val_frac * n as f64).floor() as usize;
    let n_test = (test_frac * n as f64).floor() as usize;
    if n_val + n_test >= n {
        return Err(Error::InvalidArgument(format!(
            "not enough examples for splits: {n} total, {n_val} val + {n_test} test"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(seed);
    ids.shuffle(&mut rng);
    let test: BTreeSet<usize> = ids[..n_test].iter().copied().collect();
    let val: BTreeSet<usize> = ids[n_test..n_test + n_val].iter().copied().collect();
    let pool: BTreeSet<usize> = ids[n_test + n_val..].iter().copied().collect();
    Pool::new(examples, num_classes, pool, val, test)
}

/// A pool plus the artifacts needed to interpret and replay it.
#[derive(Debug)]
pub struct PoolBundle {
    pub pool: Pool,
    pub vocab: Vocab,
    pub label_names: Vec<String>,
}

/// Loads or generates the corpus, builds the vocabulary, tokenizes, and
/// splits — the one-call setup used by the CLI.
pub fn build_pool(spec: &DatasetSpec, master_seed: u64) -> Result<PoolBundle> {
    spec.validate()?;
    let (mut examples, num_classes, label_names) = match &spec.source {
        DataSource::File { path, format } => {
            let ds = load_dataset(path, *format)?;
            (ds.examples, ds.num_classes, ds.label_names)
        }
        DataSource::Synthetic {
            n,
            classes,
            vocab_size,
            noise,
        } => {
            let examples = synth_generate(
                *n,
                *classes,
                *vocab_size,
                *noise,
                seed::derive(master_seed, Stream::SynthGen, 0),
            )?;
            let names = (0..*classes).map(|c| c.to_string()).collect();
            (examples, *classes, names)
        }
    };
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "dataset needs at least 2 labeled classes, found {num_classes}"
        )));
    }
    let vocab = Vocab::build(&examples, spec.min_count);
    tokenize_examples(&mut examples, &vocab, spec.max_len);
    let pool = make_splits(
        examples,
        num_classes,
        spec.val_frac,
        spec.test_frac,
        seed::derive(master_seed, Stream::Splits, 0),
    )?;
    Ok(PoolBundle {
        pool,
        vocab,
        label_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(content: &str, ext: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn load_csv_two_lines() {
        let f = write_temp("text,label\nhello world,0\nbye now,1\n", ".csv");
        let ds = load_dataset(f.path(), FileFormat::Csv).unwrap();
        assert_eq!(ds.examples.len(), 2);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.examples[0].raw_text, "hello world");
        assert!(ds.examples[0].has_label());
    }

    #[test]
    fn load_jsonl_missing_label() {
        let f = write_temp(
            "{\"text\": \"has label\", \"label\": \"a\"}\n{\"text\": \"no label\"}\n",
            ".jsonl",
        );
        let ds = load_dataset(f.path(), FileFormat::Jsonl).unwrap();
        assert_eq!(ds.examples.len(), 2);
        assert!(ds.examples[0].has_label());
        assert!(!ds.examples[1].has_label());
        assert_eq!(ds.num_classes, 1);
    }

    #[test]
    fn load_trec6_shaped_file() {
        // 4,952 rows with 6 distinct labels, as in the small question
        // classification dataset.
        let mut content = String::from("text,label\n");
        for i in 0..4952 {
            content.push_str(&format!("question number {i},L{}\n", i % 6));
        }
        let f = write_temp(&content, ".csv");
        let ds = load_dataset(f.path(), FileFormat::Csv).unwrap();
        assert_eq!(ds.examples.len(), 4952);
        assert_eq!(ds.num_classes, 6);
    }

    #[test]
    fn load_empty_file_errors() {
        let f = write_temp("text,label\n", ".csv");
        assert!(matches!(
            load_dataset(f.path(), FileFormat::Csv),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn load_malformed_jsonl_names_line() {
        let f = write_temp("{\"text\": \"ok\"}\nnot json\n", ".jsonl");
        match load_dataset(f.path(), FileFormat::Jsonl) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed record error, got {other:?}"),
        }
    }

    #[test]
    fn label_map_first_appearance_order() {
        let f = write_temp("text,label\na,zebra\nb,apple\nc,zebra\n", ".csv");
        let ds = load_dataset(f.path(), FileFormat::Csv).unwrap();
        assert_eq!(ds.label_names, vec!["zebra", "apple"]);
    }

    #[test]
    fn build_vocab_count_filter() {
        let exs = vec![
            Example::new(0, vec![], None, "a b".to_string()),
            Example::new(1, vec![], None, "a c".to_string()),
        ];
        let v = Vocab::build(&exs, 2);
        assert_eq!(v.size(), 4); // 3 specials + "a"
        assert!(v.id_of("a").is_some());
        assert!(v.id_of("b").is_none());
    }

    #[test]
    fn build_vocab_min_count_one() {
        let exs = vec![Example::new(0, vec![], None, "x y z".to_string())];
        let v = Vocab::build(&exs, 1);
        assert_eq!(v.size(), 6);
    }

    #[test]
    fn tokenize_empty_text_yields_unk() {
        let exs = vec![Example::new(0, vec![], None, "a".to_string())];
        let v = Vocab::build(&exs, 1);
        assert_eq!(v.tokenize("", 16), vec![Vocab::UNK]);
        assert_eq!(v.tokenize("   ", 16), vec![Vocab::UNK]);
    }

    #[test]
    fn tokenize_is_pure_and_truncates() {
        let exs = vec![Example::new(0, vec![], None, "a b c d e".to_string())];
        let v = Vocab::build(&exs, 1);
        assert_eq!(v.tokenize("A b C", 16), v.tokenize("a B c", 16));
        assert_eq!(v.tokenize("a b c d e", 3).len(), 3);
    }

    #[test]
    fn make_splits_fractions() {
        let exs: Vec<Example> = (0..100)
            .map(|i| Example::new(i, vec![1], Some(i % 2), format!("t{i}")))
            .collect();
        let pool = make_splits(exs, 2, 0.1, 0.0, 7).unwrap();
        assert_eq!(pool.val_idx().len(), 10);
        assert_eq!(pool.pool_idx().len(), 90);
        assert_eq!(pool.lab_idx().len(), 0);
        assert_eq!(pool.test_idx().len(), 0);
    }

    #[test]
    fn make_splits_deterministic() {
        let make = || {
            let exs: Vec<Example> = (0..50)
                .map(|i| Example::new(i, vec![1], Some(i % 2), format!("t{i}")))
                .collect();
            make_splits(exs, 2, 0.2, 0.2, 99).unwrap()
        };
        let a = make();
        let b = make();
        assert_eq!(a.val_idx(), b.val_idx());
        assert_eq!(a.test_idx(), b.test_idx());
        assert_eq!(a.pool_idx(), b.pool_idx());
    }

    #[test]
    fn make_splits_agnews_shaped_val() {
        let exs: Vec<Example> = (0..114_000)
            .map(|i| Example::new(i, vec![1], Some(i % 4), String::new()))
            .collect();
        let pool = make_splits(exs, 4, 0.05, 0.0, 1).unwrap();
        assert_eq!(pool.val_idx().len(), 5700);
    }

    #[test]
    fn make_splits_rejects_bad_fractions() {
        let exs: Vec<Example> = (0..10)
            .map(|i| Example::new(i, vec![1], Some(0), String::new()))
            .collect();
        assert!(make_splits(exs, 2, 0.7, 0.5, 1).is_err());
    }

    #[test]
    fn synth_deterministic() {
        let a = synth_generate(50, 3, 60, 0.5, 123).unwrap();
        let b = synth_generate(50, 3, 60, 0.5, 123).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synth_covers_all_classes() {
        let exs = synth_generate(7, 3, 60, 0.0, 5).unwrap();
        let classes: BTreeSet<usize> = (0..3).collect();
        let seen: BTreeSet<usize> = exs
            .iter()
            .map(|e| e.label.expect("synthetic examples are labeled"))
            .collect();
        assert_eq!(seen, classes);
    }

    #[test]
    fn synth_noise_zero_signal_supports_disjoint() {
        let exs = synth_generate(300, 4, 80, 0.0, 11).unwrap();
        let mut class_words: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); 4];
        for ex in &exs {
            let c = ex.label.unwrap();
            for w in ex.raw_text.split_whitespace() {
                class_words[c].insert(w);
            }
        }
        for a in 0..4 {
            for b in (a + 1)..4 {
                assert!(
                    class_words[a].is_disjoint(&class_words[b]),
                    "classes {a} and {b} share tokens at noise=0"
                );
            }
        }
        // Observed words also stay within the declared signal sets.
        let declared = synth_signal_words(4, 80);
        for (c, words) in class_words.iter().enumerate() {
            for w in words {
                assert!(declared[c].contains(*w));
            }
        }
    }

    /// Tiny multinomial naive Bayes over token counts; the independent
    /// oracle for the noise extremes.
    fn naive_bayes_accuracy(train: &[Example], test: &[Example], num_classes: usize) -> f64 {
        let mut word_counts: Vec<HashMap<&str, f64>> = vec![HashMap::new(); num_classes];
        let mut class_totals = vec![0.0f64; num_classes];
        for ex in train {
            let c = ex.label.unwrap();
            for w in ex.raw_text.split_whitespace() {
                *word_counts[c].entry(w).or_insert(0.0) += 1.0;
                class_totals[c] += 1.0;
            }
        }
        let vocab: BTreeSet<&str> = train
            .iter()
            .chain(test)
            .flat_map(|e| e.raw_text.split_whitespace())
            .collect();
        let v = vocab.len() as f64;
        let mut correct = 0usize;
        for ex in test {
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..num_classes {
                let mut score = 0.0;
                for w in ex.raw_text.split_whitespace() {
                    let cnt = word_counts[c].get(w).copied().unwrap_or(0.0);
                    score += ((cnt + 1.0) / (class_totals[c] + v)).ln();
                }
                if score > best.1 {
                    best = (c, score);
                }
            }
            if best.0 == ex.label.unwrap() {
                correct += 1;
            }
        }
        correct as f64 / test.len() as f64
    }

    #[test]
    fn synth_noise_zero_is_separable() {
        let exs = synth_generate(400, 4, 80, 0.0, 21).unwrap();
        let (train, test) = exs.split_at(200);
        assert_eq!(naive_bayes_accuracy(train, test, 4), 1.0);
    }

    #[test]
    fn synth_noise_one_is_chance_level() {
        // At noise=1 every class draws from the same background
        // distribution, so even a well-fit classifier sits at 1/C.
        let exs = synth_generate(3000, 2, 40, 1.0, 33).unwrap();
        let (train, test) = exs.split_at(1500);
        let acc = naive_bayes_accuracy(train, test, 2);
        // 3 sigma of a fair coin over 1500 trials is ~0.039.
        assert!(
            (acc - 0.5).abs() < 0.05,
            "expected chance-level accuracy, got {acc}"
        );
    }

    #[test]
    fn pool_label_moves_and_partition() {
        let exs: Vec<Example> = (0..100)
            .map(|i| Example::new(i, vec![1], Some(i % 2), format!("t{i}")))
            .collect();
        let mut pool = make_splits(exs, 2, 0.0, 0.0, 3).unwrap();
        let first_ten: Vec<usize> = pool.pool_idx().iter().take(10).copied().collect();
        pool.label(&first_ten).unwrap();
        assert_eq!(pool.lab_idx().len(), 10);
        assert_eq!(pool.pool_idx().len(), 90);
        pool.verify_partition().unwrap();

        // Empty move is the identity.
        pool.label(&[]).unwrap();
        assert_eq!(pool.lab_idx().len(), 10);

        // Second batch of 10.
        let next_ten: Vec<usize> = pool.pool_idx().iter().take(10).copied().collect();
        pool.label(&next_ten).unwrap();
        assert_eq!(pool.lab_idx().len(), 20);
        pool.verify_partition().unwrap();
    }

    #[test]
    fn pool_label_rejects_bad_indices() {
        let exs: Vec<Example> = (0..10)
            .map(|i| Example::new(i, vec![1], Some(0), String::new()))
            .collect();
        let mut pool = make_splits(exs, 2, 0.0, 0.0, 3).unwrap();
        let id = *pool.pool_idx().iter().next().unwrap();
        pool.label(&[id]).unwrap();
        assert!(pool.label(&[id]).is_err()); // already labeled
        assert!(pool.label(&[999]).is_err()); // out of range
        let two = *pool.pool_idx().iter().next().unwrap();
        assert!(pool.label(&[two, two]).is_err()); // duplicate in batch
    }

    #[test]
    fn label_access_counter() {
        let exs: Vec<Example> = (0..10)
            .map(|i| Example::new(i, vec![1], Some(i % 2), String::new()))
            .collect();
        let pool = make_splits(exs, 2, 0.0, 0.0, 3).unwrap();
        assert_eq!(pool.label_reads(), 0);
        let _ = pool.label_of(0);
        let _ = pool.label_of(1);
        assert_eq!(pool.label_reads(), 2);
        pool.reset_label_reads();
        assert_eq!(pool.label_reads(), 0);
    }

    #[test]
    fn dataset_spec_validates_fractions() {
        let mut spec = DatasetSpec {
            name: "t".to_string(),
            source: DataSource::Synthetic {
                n: 100,
                classes: 2,
                vocab_size: 40,
                noise: 0.2,
            },
            k_frac: 0.01,
            budget_frac: 0.15,
            val_frac: 0.1,
            test_frac: 0.1,
            min_count: 1,
            max_len: 32,
        };
        spec.validate().unwrap();
        spec.k_frac = 0.2; // k above budget
        assert!(spec.validate().is_err());
        spec.k_frac = 0.01;
        spec.budget_frac = 1.5;
        assert!(spec.validate().is_err());
        spec.budget_frac = 0.15;
        spec.val_frac = 0.6;
        spec.test_frac = 0.5;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn synth_rejects_degenerate_params() {
        assert!(synth_generate(1, 2, 40, 0.0, 1).is_err()); // n < C
        assert!(synth_generate(10, 1, 40, 0.0, 1).is_err()); // C < 2
        assert!(synth_generate(10, 2, 5, 0.0, 1).is_err()); // vocab too small
    }
}
