//! The simulator's model family: an embedding encoder with masked mean
//! pooling and one tanh hidden layer, plus a classifier head and a
//! masked-token head.
//!
//! Forward: embed tokens, mean-pool over real positions, `h = tanh(W1 x + b1)`,
//! dropout on `h` (train and MC modes only, inverted scaling), then either
//! the classifier head `softmax(Wc h + bc)` or the masked-token head
//! `softmax(Wm h + bm)`. All gradients are hand-derived and checked against
//! central finite differences in the tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::seed::{self, Stream};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.embed_dim == 0
            || self.hidden_dim == 0
            || self.num_classes == 0
            || self.max_len == 0
        {
            return Err(Error::InvalidArgument(
                "all net dimensions must be >= 1".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub cfg: NetConfig,
    /// vocab_size x embed_dim token embeddings.
    pub e: Mat,
    /// embed_dim x hidden_dim encoder layer.
    pub w1: Mat,
    pub b1: Vec<f64>,
    /// hidden_dim x num_classes classifier head.
    pub wc: Mat,
    pub bc: Vec<f64>,
    /// hidden_dim x vocab_size masked-token head.
    pub wm: Mat,
    pub bm: Vec<f64>,
}

/// Gradient (or moment) buffers, one flat vector per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub e: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub wc: Vec<f64>,
    pub bc: Vec<f64>,
    pub wm: Vec<f64>,
    pub bm: Vec<f64>,
}

impl Grads {
    pub fn zeros_like(w: &Weights) -> Self {
        Self {
            e: vec![0.0; w.e.data.len()],
            w1: vec![0.0; w.w1.data.len()],
            b1: vec![0.0; w.b1.len()],
            wc: vec![0.0; w.wc.data.len()],
            bc: vec![0.0; w.bc.len()],
            wm: vec![0.0; w.wm.data.len()],
            bm: vec![0.0; w.bm.len()],
        }
    }

    pub fn blocks(&self) -> [(&'static str, &[f64]); 7] {
        [
            ("E", &self.e),
            ("W1", &self.w1),
            ("b1", &self.b1),
            ("Wc", &self.wc),
            ("bc", &self.bc),
            ("Wm", &self.wm),
            ("bm", &self.bm),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 7] {
        [
            ("E", &mut self.e),
            ("W1", &mut self.w1),
            ("b1", &mut self.b1),
            ("Wc", &mut self.wc),
            ("bc", &mut self.bc),
            ("Wm", &mut self.wm),
            ("bm", &mut self.bm),
        ]
    }

    pub fn norm(&self) -> f64 {
        self.blocks()
            .iter()
            .map(|(_, b)| b.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

impl Weights {
    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 7] {
        [
            ("E", &mut self.e.data),
            ("W1", &mut self.w1.data),
            ("b1", &mut self.b1),
            ("Wc", &mut self.wc.data),
            ("bc", &mut self.bc),
            ("Wm", &mut self.wm.data),
            ("bm", &mut self.bm),
        ]
    }

    pub fn blocks(&self) -> [(&'static str, &[f64]); 7] {
        [
            ("E", &self.e.data),
            ("W1", &self.w1.data),
            ("b1", &self.b1),
            ("Wc", &self.wc.data),
            ("bc", &self.bc),
            ("Wm", &self.wm.data),
            ("bm", &self.bm),
        ]
    }

    /// FNV-1a over raw parameter bits; used to compare snapshots cheaply.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (_, block) in self.blocks() {
            for v in block {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Forward-pass mode. Dropout is active in `Train` and `McDropout`; `Eval`
/// is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    McDropout,
}

/// Classification inputs: ragged token sequences (no PAD stored; the
/// real-token mask is implicit in sequence length) with one label each.
#[derive(Debug, Clone)]
pub struct ClassifyBatch {
    pub seqs: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
}

/// Masked-token inputs: corrupted sequences plus, per example, the masked
/// positions with their original token ids.
#[derive(Debug, Clone)]
pub struct MlmBatch {
    pub seqs: Vec<Vec<u32>>,
    pub targets: Vec<Vec<(usize, u32)>>,
}

/// Per-example activations cached by a train-mode forward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pooled: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    /// Dropout scale per hidden unit: 0 for dropped, 1/(1-p) for kept,
    /// all-ones in eval mode.
    drop_scale: Vec<Vec<f64>>,
}

/// Output of a forward pass: one probability row per example, plus cached
/// activations when the pass ran in train mode.
#[derive(Debug, Clone)]
pub struct Forward {
    pub probs: Vec<Vec<f64>>,
    pub cache: Option<ForwardCache>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&x| x / sum).collect()
}

fn check_tokens(w: &Weights, seqs: &[Vec<u32>]) -> Result<()> {
    for seq in seqs {
        if seq.is_empty() {
            return Err(Error::InvalidArgument(
                "empty token sequence in batch".to_string(),
            ));
        }
        if let Some(&t) = seq.iter().find(|&&t| t as usize >= w.cfg.vocab_size) {
            return Err(Error::ShapeMismatch(format!(
                "token id {t} out of range for vocab size {}",
                w.cfg.vocab_size
            )));
        }
    }
    Ok(())
}

/// Mean of embedding rows over all (real) positions. Summation runs in
/// sorted token order so identical token multisets pool to bit-identical
/// vectors regardless of word order.
fn pool_tokens(w: &Weights, seq: &[u32]) -> Vec<f64> {
    let d = w.cfg.embed_dim;
    let mut sorted = seq.to_vec();
    sorted.sort_unstable();
    let mut pooled = vec![0.0; d];
    for &t in &sorted {
        let row = w.e.row(t as usize);
        for i in 0..d {
            pooled[i] += row[i];
        }
    }
    let inv = 1.0 / seq.len() as f64;
    for v in pooled.iter_mut() {
        *v *= inv;
    }
    pooled
}

#[allow(clippy::needless_range_loop)]
fn hidden_from_pooled(w: &Weights, pooled: &[f64]) -> Vec<f64> {
    let (de, dh) = (w.cfg.embed_dim, w.cfg.hidden_dim);
    let mut h = w.b1.clone();
    for i in 0..de {
        let x = pooled[i];
        if x == 0.0 {
            continue;
        }
        let row = w.w1.row(i);
        for j in 0..dh {
            h[j] += x * row[j];
        }
    }
    for v in h.iter_mut() {
        *v = v.tanh();
    }
    h
}

pub(crate) fn draw_drop_scale(dh: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..dh)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

fn drop_scales(
    w: &Weights,
    n: usize,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Vec<f64>>> {
    let dh = w.cfg.hidden_dim;
    let p = w.cfg.dropout;
    if mode == Mode::Eval || p == 0.0 {
        return Ok(vec![vec![1.0; dh]; n]);
    }
    let rng = rng.ok_or_else(|| {
        Error::InvalidArgument("dropout-active forward needs an rng".to_string())
    })?;
    Ok((0..n).map(|_| draw_drop_scale(dh, p, rng)).collect())
}

fn head_logits(head: &Mat, bias: &[f64], h_drop: &[f64]) -> Vec<f64> {
    let mut logits = bias.to_vec();
    for (j, &hj) in h_drop.iter().enumerate() {
        if hj == 0.0 {
            continue;
        }
        let row = head.row(j);
        for (c, l) in logits.iter_mut().enumerate() {
            *l += hj * row[c];
        }
    }
    logits
}

pub(crate) fn classify_probs_from_hidden(w: &Weights, h_drop: &[f64]) -> Vec<f64> {
    softmax(&head_logits(&w.wc, &w.bc, h_drop))
}

fn run_forward(
    w: &Weights,
    seqs: &[Vec<u32>],
    head: &Mat,
    bias: &[f64],
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Forward> {
    check_tokens(w, seqs)?;
    let scales = drop_scales(w, seqs.len(), mode, rng)?;
    let mut probs = Vec::with_capacity(seqs.len());
    let mut pooled_all = Vec::new();
    let mut hidden_all = Vec::new();
    for (seq, scale) in seqs.iter().zip(&scales) {
        let pooled = pool_tokens(w, seq);
        let h = hidden_from_pooled(w, &pooled);
        let h_drop: Vec<f64> = h.iter().zip(scale).map(|(a, s)| a * s).collect();
        probs.push(softmax(&head_logits(head, bias, &h_drop)));
        if mode == Mode::Train {
            pooled_all.push(pooled);
            hidden_all.push(h);
        }
    }
    let cache = (mode == Mode::Train).then_some(ForwardCache {
        pooled: pooled_all,
        hidden: hidden_all,
        drop_scale: scales,
    });
    Ok(Forward { probs, cache })
}

/// Class probabilities for a batch. Each row sums to 1; dropout is applied
/// iff `mode` is `Train` or `McDropout`.
pub fn forward_classify(
    w: &Weights,
    batch: &ClassifyBatch,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Forward> {
    if batch.labels.len() != batch.seqs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} sequences vs {} labels",
            batch.seqs.len(),
            batch.labels.len()
        )));
    }
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= w.cfg.num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {y} out of range for {} classes",
            w.cfg.num_classes
        )));
    }
    run_forward(w, &batch.seqs, &w.wc, &w.bc, mode, rng)
}

/// Masked-token predictive distribution over the vocabulary, one row per
/// example. Input tokens at masked positions are replaced by MASK before
/// encoding; with the pooled encoder every masked position of an example
/// shares its row.
pub fn forward_mlm(
    w: &Weights,
    batch: &MlmBatch,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Forward> {
    if batch.targets.len() != batch.seqs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} sequences vs {} target lists",
            batch.seqs.len(),
            batch.targets.len()
        )));
    }
    for (seq, targets) in batch.seqs.iter().zip(&batch.targets) {
        for &(pos, _) in targets {
            if pos >= seq.len() {
                return Err(Error::InvalidArgument(format!(
                    "masked position {pos} points past the real tokens (len {})",
                    seq.len()
                )));
            }
        }
    }
    run_forward(w, &batch.seqs, &w.wm, &w.bm, mode, rng)
}

/// Mean cross-entropy of class predictions against labels.
pub fn classify_loss(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = probs.len().max(1);
    probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| -(p[y].max(1e-12)).ln())
        .sum::<f64>()
        / n as f64
}

/// Masked-token cross-entropy, averaged over all masked positions in the
/// batch.
pub fn mlm_loss(probs: &[Vec<f64>], targets: &[Vec<(usize, u32)>]) -> f64 {
    let total: usize = targets.iter().map(|t| t.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let mut loss = 0.0;
    for (p, tgts) in probs.iter().zip(targets) {
        for &(_, tgt) in tgts {
            loss -= p[tgt as usize].max(1e-12).ln();
        }
    }
    loss / total as f64
}

/// Shared backward path from d(logits) down to the embeddings.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
fn backprop_from_dlogits(
    w: &Weights,
    cache: &ForwardCache,
    seqs: &[Vec<u32>],
    head: &Mat,
    dlogits_per_example: &[Vec<f64>],
    g_head: &mut [f64],
    g_head_bias: &mut [f64],
    g: &mut Grads,
) {
    let (de, dh) = (w.cfg.embed_dim, w.cfg.hidden_dim);
    let out = head.cols;
    for (i, dlogits) in dlogits_per_example.iter().enumerate() {
        let h = &cache.hidden[i];
        let scale = &cache.drop_scale[i];
        let pooled = &cache.pooled[i];

        // Head: logits = head^T h_drop + bias.
        for j in 0..dh {
            let hd = h[j] * scale[j];
            if hd != 0.0 {
                let row = &mut g_head[j * out..(j + 1) * out];
                for c in 0..out {
                    row[c] += hd * dlogits[c];
                }
            }
        }
        for c in 0..out {
            g_head_bias[c] += dlogits[c];
        }

        // Into the hidden layer: through dropout scale then tanh.
        let mut dz = vec![0.0; dh];
        for j in 0..dh {
            let mut dh_drop = 0.0;
            let row = head.row(j);
            for c in 0..out {
                dh_drop += row[c] * dlogits[c];
            }
            dz[j] = dh_drop * scale[j] * (1.0 - h[j] * h[j]);
        }

        // W1, b1, and the pooled embedding.
        for a in 0..de {
            let x = pooled[a];
            if x != 0.0 {
                let row = &mut g.w1[a * dh..(a + 1) * dh];
                for j in 0..dh {
                    row[j] += x * dz[j];
                }
            }
        }
        for j in 0..dh {
            g.b1[j] += dz[j];
        }
        let mut dpooled = vec![0.0; de];
        for a in 0..de {
            let row = w.w1.row(a);
            let mut acc = 0.0;
            for j in 0..dh {
                acc += row[j] * dz[j];
            }
            dpooled[a] = acc;
        }

        // Mean pooling scatters evenly over real positions.
        let seq = &seqs[i];
        let inv_len = 1.0 / seq.len() as f64;
        for &t in seq {
            let row = &mut g.e[t as usize * de..(t as usize + 1) * de];
            for a in 0..de {
                row[a] += dpooled[a] * inv_len;
            }
        }
    }
}

/// Exact gradients of the mean classification cross-entropy. Requires the
/// forward to have run in train mode.
pub fn backward_classify(w: &Weights, fwd: &Forward, batch: &ClassifyBatch) -> Result<Grads> {
    let cache = fwd.cache.as_ref().ok_or_else(|| {
        Error::InvalidArgument("backward requires a train-mode forward".to_string())
    })?;
    let n = batch.seqs.len() as f64;
    let dlogits: Vec<Vec<f64>> = fwd
        .probs
        .iter()
        .zip(&batch.labels)
        .map(|(p, &y)| {
            let mut d: Vec<f64> = p.iter().map(|&v| v / n).collect();
            d[y] -= 1.0 / n;
            d
        })
        .collect();
    let mut g = Grads::zeros_like(w);
    let mut g_wc = std::mem::take(&mut g.wc);
    let mut g_bc = std::mem::take(&mut g.bc);
    backprop_from_dlogits(w, cache, &batch.seqs, &w.wc, &dlogits, &mut g_wc, &mut g_bc, &mut g);
    g.wc = g_wc;
    g.bc = g_bc;
    Ok(g)
}

/// Exact gradients of the masked-token cross-entropy (mean over masked
/// positions).
pub fn backward_mlm(w: &Weights, fwd: &Forward, batch: &MlmBatch) -> Result<Grads> {
    let cache = fwd.cache.as_ref().ok_or_else(|| {
        Error::InvalidArgument("backward requires a train-mode forward".to_string())
    })?;
    let total: usize = batch.targets.iter().map(|t| t.len()).sum();
    let mut g = Grads::zeros_like(w);
    if total == 0 {
        return Ok(g);
    }
    let inv = 1.0 / total as f64;
    // Every masked position of an example shares the same predictive row, so
    // the per-example d(logits) is n_i * p - sum of target one-hots, scaled.
    let dlogits: Vec<Vec<f64>> = fwd
        .probs
        .iter()
        .zip(&batch.targets)
        .map(|(p, tgts)| {
            let n_i = tgts.len() as f64;
            let mut d: Vec<f64> = p.iter().map(|&v| v * n_i * inv).collect();
            for &(_, tgt) in tgts {
                d[tgt as usize] -= inv;
            }
            d
        })
        .collect();
    let mut g_wm = std::mem::take(&mut g.wm);
    let mut g_bm = std::mem::take(&mut g.bm);
    backprop_from_dlogits(w, cache, &batch.seqs, &w.wm, &dlogits, &mut g_wm, &mut g_bm, &mut g);
    g.wm = g_wm;
    g.bm = g_bm;
    Ok(g)
}

/// Deterministic pooled hidden representation (no dropout).
pub fn encode(w: &Weights, tokens: &[u32]) -> Result<Vec<f64>> {
    check_tokens(w, std::slice::from_ref(&tokens.to_vec()))?;
    Ok(hidden_from_pooled(w, &pool_tokens(w, tokens)))
}

/// Gradient of the classification cross-entropy w.r.t. the last layer (Wc
/// and its bias), taking the model's own argmax prediction as pseudo-label.
///
/// Layout is class-major, bias last per class:
/// `g[j*(dh+1)..(j+1)*(dh+1)] = (p_j - [j == argmax]) * [h; 1]`.
pub fn last_layer_gradient_embedding(w: &Weights, tokens: &[u32]) -> Result<Vec<f64>> {
    let h = encode(w, tokens)?;
    let p = classify_probs_from_hidden(w, &h);
    let pred = argmax_lowest(&p);
    let dh = w.cfg.hidden_dim;
    let mut out = Vec::with_capacity(w.cfg.num_classes * (dh + 1));
    for (j, &pj) in p.iter().enumerate() {
        let coeff = pj - if j == pred { 1.0 } else { 0.0 };
        for &hv in &h {
            out.push(coeff * hv);
        }
        out.push(coeff);
    }
    Ok(out)
}

/// Index of the maximum value; ties resolve to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn glorot_fill(mat: &mut Mat, rng: &mut ChaCha8Rng) {
    let limit = (6.0 / (mat.rows + mat.cols) as f64).sqrt();
    for v in mat.data.iter_mut() {
        *v = rng.random_range(-limit..limit);
    }
}

/// Initializes weights. The encoder blocks (E, W1, b1, Wm, bm) are copied
/// from `from_encoder` when given, otherwise sampled; the classifier head is
/// always freshly sampled from the seed's head stream, which is independent
/// of whether an encoder was supplied.
pub fn init_weights(cfg: &NetConfig, init_seed: u64, from_encoder: Option<&Weights>) -> Result<Weights> {
    cfg.validate()?;
    let mut enc_rng = seed::rng(seed::derive(init_seed, Stream::EncoderInit, 0));
    let mut head_rng = seed::rng(seed::derive(init_seed, Stream::HeadInit, 0));

    let mut w = Weights {
        cfg: *cfg,
        e: Mat::zeros(cfg.vocab_size, cfg.embed_dim),
        w1: Mat::zeros(cfg.embed_dim, cfg.hidden_dim),
        b1: vec![0.0; cfg.hidden_dim],
        wc: Mat::zeros(cfg.hidden_dim, cfg.num_classes),
        bc: vec![0.0; cfg.num_classes],
        wm: Mat::zeros(cfg.hidden_dim, cfg.vocab_size),
        bm: vec![0.0; cfg.vocab_size],
    };

    match from_encoder {
        Some(src) => {
            if src.cfg.vocab_size != cfg.vocab_size
                || src.cfg.embed_dim != cfg.embed_dim
                || src.cfg.hidden_dim != cfg.hidden_dim
            {
                return Err(Error::ShapeMismatch(format!(
                    "encoder shapes ({}, {}, {}) do not match config ({}, {}, {})",
                    src.cfg.vocab_size,
                    src.cfg.embed_dim,
                    src.cfg.hidden_dim,
                    cfg.vocab_size,
                    cfg.embed_dim,
                    cfg.hidden_dim
                )));
            }
            w.e = src.e.clone();
            w.w1 = src.w1.clone();
            w.b1 = src.b1.clone();
            w.wm = src.wm.clone();
            w.bm = src.bm.clone();
        }
        None => {
            glorot_fill(&mut w.e, &mut enc_rng);
            glorot_fill(&mut w.w1, &mut enc_rng);
            glorot_fill(&mut w.wm, &mut enc_rng);
        }
    }
    glorot_fill(&mut w.wc, &mut head_rng);
    Ok(w)
}

// --- checkpoint format -----------------------------------------------------
//
// Versioned flat binary, little-endian:
//   magic "ALTN" | version u32 | adapted u32 | vocab u32 | embed u32 |
//   hidden u32 | classes u32 | max_len u32 | dropout f64 |
//   then row-major f64 arrays: E, W1, b1, Wc, bc, Wm, bm.

const CKPT_MAGIC: &[u8; 4] = b"ALTN";
const CKPT_VERSION: u32 = 1;

/// Serializes weights to the flat binary checkpoint format. Round-trips are
/// bit-exact.
pub fn save_checkpoint(path: &std::path::Path, w: &Weights, adapted: bool) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(adapted as u32).to_le_bytes());
    for dim in [
        w.cfg.vocab_size,
        w.cfg.embed_dim,
        w.cfg.hidden_dim,
        w.cfg.num_classes,
        w.cfg.max_len,
    ] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    buf.extend_from_slice(&w.cfg.dropout.to_le_bytes());
    for (_, block) in w.blocks() {
        for v in block {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::runio::write_atomic(path, &buf)
}

/// Loads a checkpoint; returns the weights and the adapted flag.
pub fn load_checkpoint(path: &std::path::Path) -> Result<(Weights, bool)> {
    let buf = std::fs::read(path)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > buf.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at byte {}",
                path.display(),
                *off
            )));
        }
        let s = &buf[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 4)? != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic (not a checkpoint)",
            path.display()
        )));
    }
    let read_u32 = |off: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(off, 4)?.try_into().unwrap()))
    };
    let version = read_u32(&mut off)?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let adapted = read_u32(&mut off)? != 0;
    let vocab_size = read_u32(&mut off)? as usize;
    let embed_dim = read_u32(&mut off)? as usize;
    let hidden_dim = read_u32(&mut off)? as usize;
    let num_classes = read_u32(&mut off)? as usize;
    let max_len = read_u32(&mut off)? as usize;
    let dropout = f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
    let cfg = NetConfig {
        vocab_size,
        embed_dim,
        hidden_dim,
        num_classes,
        dropout,
        max_len,
    };
    cfg.validate()
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;

    let mut w = Weights {
        cfg,
        e: Mat::zeros(vocab_size, embed_dim),
        w1: Mat::zeros(embed_dim, hidden_dim),
        b1: vec![0.0; hidden_dim],
        wc: Mat::zeros(hidden_dim, num_classes),
        bc: vec![0.0; num_classes],
        wm: Mat::zeros(hidden_dim, vocab_size),
        bm: vec![0.0; vocab_size],
    };
    for (_, block) in w.blocks_mut() {
        for v in block.iter_mut() {
            *v = f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        }
    }
    if off != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes",
            path.display(),
            buf.len() - off
        )));
    }
    Ok((w, adapted))
}

/// Builds a classification batch from pool examples.
pub fn classify_batch(examples: &[&Example], labels: Vec<usize>) -> ClassifyBatch {
    ClassifyBatch {
        seqs: examples.iter().map(|e| e.tokens.clone()).collect(),
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_cfg(v: usize, de: usize, dh: usize, c: usize, p: f64) -> NetConfig {
        NetConfig {
            vocab_size: v,
            embed_dim: de,
            hidden_dim: dh,
            num_classes: c,
            dropout: p,
            max_len: 16,
        }
    }

    fn zero_weights(cfg: NetConfig) -> Weights {
        Weights {
            cfg,
            e: Mat::zeros(cfg.vocab_size, cfg.embed_dim),
            w1: Mat::zeros(cfg.embed_dim, cfg.hidden_dim),
            b1: vec![0.0; cfg.hidden_dim],
            wc: Mat::zeros(cfg.hidden_dim, cfg.num_classes),
            bc: vec![0.0; cfg.num_classes],
            wm: Mat::zeros(cfg.hidden_dim, cfg.vocab_size),
            bm: vec![0.0; cfg.vocab_size],
        }
    }

    fn rand_batch(v: usize, c: usize, n: usize, seed: u64) -> ClassifyBatch {
        let mut rng = seed::rng(seed);
        let seqs = (0..n)
            .map(|_| {
                let len = rng.random_range(1..8);
                (0..len).map(|_| rng.random_range(0..v as u32)).collect()
            })
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
        ClassifyBatch { seqs, labels }
    }

    #[test]
    fn eval_rows_are_distributions() {
        let cfg = small_cfg(20, 5, 6, 4, 0.1);
        let w = init_weights(&cfg, 3, None).unwrap();
        let batch = rand_batch(20, 4, 9, 17);
        let fwd = forward_classify(&w, &batch, Mode::Eval, None).unwrap();
        for row in &fwd.probs {
            let sum: f64 = row.iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn zero_weights_give_uniform() {
        let cfg = small_cfg(10, 4, 4, 5, 0.0);
        let w = zero_weights(cfg);
        let batch = rand_batch(10, 5, 3, 1);
        let fwd = forward_classify(&w, &batch, Mode::Eval, None).unwrap();
        for row in &fwd.probs {
            for &p in row {
                assert_abs_diff_eq!(p, 1.0 / 5.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mc_dropout_with_p_zero_equals_eval() {
        let cfg = small_cfg(15, 4, 5, 3, 0.0);
        let w = init_weights(&cfg, 5, None).unwrap();
        let batch = rand_batch(15, 3, 4, 2);
        let eval = forward_classify(&w, &batch, Mode::Eval, None).unwrap();
        let mut rng = seed::rng(9);
        let mc = forward_classify(&w, &batch, Mode::McDropout, Some(&mut rng)).unwrap();
        assert_eq!(eval.probs, mc.probs);
    }

    #[test]
    fn mc_dropout_same_rng_state_identical() {
        let cfg = small_cfg(15, 4, 8, 3, 0.5);
        let w = init_weights(&cfg, 5, None).unwrap();
        let batch = rand_batch(15, 3, 4, 2);
        let mut r1 = seed::rng(11);
        let mut r2 = seed::rng(11);
        let a = forward_classify(&w, &batch, Mode::McDropout, Some(&mut r1)).unwrap();
        let b = forward_classify(&w, &batch, Mode::McDropout, Some(&mut r2)).unwrap();
        assert_eq!(a.probs, b.probs);
        let mut r3 = seed::rng(12);
        let c = forward_classify(&w, &batch, Mode::McDropout, Some(&mut r3)).unwrap();
        assert_ne!(a.probs, c.probs);
    }

    #[test]
    fn mlm_rows_are_distributions_and_zero_weights_uniform() {
        let cfg = small_cfg(12, 4, 4, 3, 0.0);
        let w = zero_weights(cfg);
        let batch = MlmBatch {
            seqs: vec![vec![3, 4, 5], vec![6, 7]],
            targets: vec![vec![(0, 3)], vec![(1, 7)]],
        };
        let fwd = forward_mlm(&w, &batch, Mode::Eval, None).unwrap();
        for row in &fwd.probs {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            for &p in row {
                assert_abs_diff_eq!(p, 1.0 / 12.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mlm_single_token_masked_bias_only_path() {
        // All weights zero except the masked-head bias: the pooled hidden is
        // exactly zero, so the prediction is softmax(bm) and the loss is
        // -ln softmax(bm)[target].
        let cfg = small_cfg(6, 3, 3, 2, 0.0);
        let mut w = zero_weights(cfg);
        w.bm = vec![0.5, -0.3, 0.1, 0.9, -1.2, 0.0];
        let batch = MlmBatch {
            seqs: vec![vec![crate::corpus::Vocab::MASK]],
            targets: vec![vec![(0, 4)]],
        };
        let fwd = forward_mlm(&w, &batch, Mode::Eval, None).unwrap();
        let expected = softmax(&w.bm);
        for (a, b) in fwd.probs[0].iter().zip(&expected) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let loss = mlm_loss(&fwd.probs, &batch.targets);
        assert_abs_diff_eq!(loss, -expected[4].ln(), epsilon = 1e-12);
    }

    #[test]
    fn mlm_masked_position_past_real_tokens_errors() {
        let cfg = small_cfg(6, 3, 3, 2, 0.0);
        let w = zero_weights(cfg);
        let batch = MlmBatch {
            seqs: vec![vec![3, 4]],
            targets: vec![vec![(2, 3)]],
        };
        assert!(forward_mlm(&w, &batch, Mode::Eval, None).is_err());
    }

    /// Central finite differences of a scalar loss over every coordinate.
    fn fd_check(
        w: &Weights,
        loss_fn: &dyn Fn(&Weights) -> f64,
        analytic: &Grads,
        step: f64,
        rel_tol: f64,
    ) -> (usize, usize) {
        let mut ok = 0;
        let mut total = 0;
        let blocks = analytic.blocks();
        for (bi, (_, gblock)) in blocks.iter().enumerate() {
            for k in 0..gblock.len() {
                let mut wp = w.clone();
                wp.blocks_mut()[bi].1[k] += step;
                let lp = loss_fn(&wp);
                let mut wm = w.clone();
                wm.blocks_mut()[bi].1[k] -= step;
                let lm = loss_fn(&wm);
                let num = (lp - lm) / (2.0 * step);
                let ana = gblock[k];
                let denom = num.abs().max(ana.abs()).max(1e-8);
                total += 1;
                if (num - ana).abs() / denom < rel_tol || (num - ana).abs() < 1e-8 {
                    ok += 1;
                }
            }
        }
        (ok, total)
    }

    #[test]
    fn classify_gradients_match_finite_differences() {
        let cfg = small_cfg(12, 4, 4, 3, 0.0);
        let w = init_weights(&cfg, 7, None).unwrap();
        let batch = rand_batch(12, 3, 5, 13);
        let fwd = forward_classify(&w, &batch, Mode::Train, None).unwrap();
        let g = backward_classify(&w, &fwd, &batch).unwrap();
        let loss_fn = |w: &Weights| {
            let f = forward_classify(w, &batch, Mode::Eval, None).unwrap();
            classify_loss(&f.probs, &batch.labels)
        };
        let (ok, total) = fd_check(&w, &loss_fn, &g, 1e-4, 1e-3);
        assert_eq!(ok, total, "only {ok}/{total} coordinates matched");
    }

    #[test]
    fn classify_gradients_through_fixed_dropout_mask() {
        // Re-seeding the rng on every evaluation pins the dropout mask, so
        // finite differences see the same stochastic function.
        let cfg = small_cfg(10, 3, 6, 3, 0.4);
        let w = init_weights(&cfg, 8, None).unwrap();
        let batch = rand_batch(10, 3, 4, 29);
        let mut rng = seed::rng(555);
        let fwd = forward_classify(&w, &batch, Mode::Train, Some(&mut rng)).unwrap();
        let g = backward_classify(&w, &fwd, &batch).unwrap();
        let loss_fn = |w: &Weights| {
            let mut rng = seed::rng(555);
            let f = forward_classify(w, &batch, Mode::Train, Some(&mut rng)).unwrap();
            classify_loss(&f.probs, &batch.labels)
        };
        let (ok, total) = fd_check(&w, &loss_fn, &g, 1e-4, 1e-3);
        assert!(
            ok as f64 / total as f64 >= 0.99,
            "only {ok}/{total} coordinates matched"
        );
    }

    #[test]
    fn mlm_gradients_match_finite_differences() {
        let cfg = small_cfg(9, 3, 4, 2, 0.0);
        let w = init_weights(&cfg, 19, None).unwrap();
        let batch = MlmBatch {
            seqs: vec![vec![2, 3, 4, 5], vec![6, 7, 8]],
            targets: vec![vec![(0, 3), (2, 8)], vec![(1, 4)]],
        };
        let fwd = forward_mlm(&w, &batch, Mode::Train, None).unwrap();
        let g = backward_mlm(&w, &fwd, &batch).unwrap();
        let loss_fn = |w: &Weights| {
            let f = forward_mlm(w, &batch, Mode::Eval, None).unwrap();
            mlm_loss(&f.probs, &batch.targets)
        };
        let (ok, total) = fd_check(&w, &loss_fn, &g, 1e-4, 1e-3);
        assert_eq!(ok, total, "only {ok}/{total} coordinates matched");
    }

    #[test]
    fn duplicated_batch_gives_identical_gradients() {
        let cfg = small_cfg(14, 4, 5, 3, 0.0);
        let w = init_weights(&cfg, 23, None).unwrap();
        let batch = rand_batch(14, 3, 4, 31);
        let doubled = ClassifyBatch {
            seqs: batch
                .seqs
                .iter()
                .chain(batch.seqs.iter())
                .cloned()
                .collect(),
            labels: batch
                .labels
                .iter()
                .chain(batch.labels.iter())
                .copied()
                .collect(),
        };
        let g1 = {
            let fwd = forward_classify(&w, &batch, Mode::Train, None).unwrap();
            backward_classify(&w, &fwd, &batch).unwrap()
        };
        let g2 = {
            let fwd = forward_classify(&w, &doubled, Mode::Train, None).unwrap();
            backward_classify(&w, &fwd, &doubled).unwrap()
        };
        for ((_, a), (_, b)) in g1.blocks().iter().zip(g2.blocks().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn confident_correct_prediction_has_vanishing_gradient() {
        let cfg = small_cfg(8, 3, 3, 2, 0.0);
        let mut w = zero_weights(cfg);
        w.bc = vec![40.0, -40.0];
        let batch = ClassifyBatch {
            seqs: vec![vec![1, 2]],
            labels: vec![0],
        };
        let fwd = forward_classify(&w, &batch, Mode::Train, None).unwrap();
        assert!(fwd.probs[0][0] > 1.0 - 1e-12);
        let g = backward_classify(&w, &fwd, &batch).unwrap();
        assert!(g.norm() < 1e-10, "gradient norm {}", g.norm());
    }

    #[test]
    fn gradient_embedding_closed_form_binary_uniform() {
        // Zero heads give p = [0.5, 0.5]; argmax ties to class 0, so block 0
        // is -0.5*[h;1] and block 1 is +0.5*[h;1].
        let cfg = small_cfg(8, 3, 3, 2, 0.0);
        let mut w = zero_weights(cfg);
        w.b1 = vec![0.3, -0.7, 0.2];
        let tokens = vec![1u32, 2];
        let h = encode(&w, &tokens).unwrap();
        let g = last_layer_gradient_embedding(&w, &tokens).unwrap();
        assert_eq!(g.len(), 2 * (3 + 1));
        for j in 0..3 {
            assert_abs_diff_eq!(g[j], -0.5 * h[j], epsilon = 1e-12);
            assert_abs_diff_eq!(g[4 + j], 0.5 * h[j], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(g[3], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(g[7], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn gradient_embedding_matches_finite_differences() {
        let cfg = small_cfg(12, 4, 5, 3, 0.0);
        let w = init_weights(&cfg, 41, None).unwrap();
        let tokens = vec![3u32, 7, 9];
        let g = last_layer_gradient_embedding(&w, &tokens).unwrap();

        // Pseudo-label fixed to the unperturbed argmax.
        let h = encode(&w, &tokens).unwrap();
        let pred = argmax_lowest(&classify_probs_from_hidden(&w, &h));
        let dh = w.cfg.hidden_dim;
        let step = 1e-4;
        for j in 0..w.cfg.num_classes {
            for t in 0..=dh {
                let mut wp = w.clone();
                let mut wm = w.clone();
                let loss = |w: &Weights| {
                    let h = encode(w, &tokens).unwrap();
                    let p = classify_probs_from_hidden(w, &h);
                    -(p[pred].max(1e-12)).ln()
                };
                if t < dh {
                    wp.wc.set(t, j, wp.wc.get(t, j) + step);
                    wm.wc.set(t, j, wm.wc.get(t, j) - step);
                } else {
                    wp.bc[j] += step;
                    wm.bc[j] -= step;
                }
                let num = (loss(&wp) - loss(&wm)) / (2.0 * step);
                let ana = g[j * (dh + 1) + t];
                let denom = num.abs().max(ana.abs()).max(1e-8);
                assert!(
                    (num - ana).abs() / denom < 1e-3 || (num - ana).abs() < 1e-8,
                    "coordinate ({j},{t}): fd={num} analytic={ana}"
                );
            }
        }
    }

    #[test]
    fn gradient_embedding_confident_prediction_vanishes() {
        let cfg = small_cfg(8, 3, 3, 2, 0.0);
        let mut w = zero_weights(cfg);
        w.bc = vec![40.0, -40.0];
        let g = last_layer_gradient_embedding(&w, &[1, 2]).unwrap();
        let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-10);
    }

    #[test]
    fn encode_deterministic_and_order_invariant() {
        let cfg = small_cfg(12, 4, 5, 3, 0.3);
        let w = init_weights(&cfg, 2, None).unwrap();
        let a = encode(&w, &[3, 5, 7]).unwrap();
        let b = encode(&w, &[3, 5, 7]).unwrap();
        assert_eq!(a, b);
        let c = encode(&w, &[7, 3, 5]).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn encode_zero_weights_gives_activated_bias() {
        let cfg = small_cfg(8, 3, 3, 2, 0.0);
        let mut w = zero_weights(cfg);
        w.b1 = vec![0.5, -1.0, 0.0];
        let h = encode(&w, &[1, 2, 3]).unwrap();
        for (hv, bv) in h.iter().zip(&w.b1) {
            assert_abs_diff_eq!(hv, &bv.tanh(), epsilon = 1e-12);
        }
    }

    #[test]
    fn init_copy_semantics_and_determinism() {
        let cfg = small_cfg(20, 6, 5, 4, 0.1);
        let w0 = init_weights(&cfg, 1, None).unwrap();
        let w0_again = init_weights(&cfg, 1, None).unwrap();
        assert_eq!(w0, w0_again);

        let w1 = init_weights(&cfg, 2, Some(&w0)).unwrap();
        assert_eq!(w1.e, w0.e);
        assert_eq!(w1.w1, w0.w1);
        assert_eq!(w1.wm, w0.wm);
        assert_ne!(w1.wc, w0.wc);
    }

    #[test]
    fn init_respects_glorot_bound() {
        let cfg = small_cfg(30, 8, 6, 4, 0.1);
        let w = init_weights(&cfg, 77, None).unwrap();
        for (mat, (rows, cols)) in [
            (&w.e, (30usize, 8usize)),
            (&w.w1, (8, 6)),
            (&w.wc, (6, 4)),
            (&w.wm, (6, 30)),
        ] {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            for &v in &mat.data {
                assert!(v.abs() <= limit, "{v} exceeds glorot limit {limit}");
            }
        }
    }

    #[test]
    fn init_rejects_mismatched_encoder() {
        let cfg = small_cfg(20, 6, 5, 4, 0.1);
        let other = small_cfg(21, 6, 5, 4, 0.1);
        let w0 = init_weights(&other, 1, None).unwrap();
        assert!(init_weights(&cfg, 2, Some(&w0)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let cfg = small_cfg(18, 5, 4, 3, 0.25);
        let w = init_weights(&cfg, 99, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &w, true).unwrap();
        let (loaded, adapted) = load_checkpoint(&path).unwrap();
        assert!(adapted);
        assert_eq!(loaded.cfg, w.cfg);
        for ((_, a), (_, b)) in w.blocks().iter().zip(loaded.blocks().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn out_of_range_token_errors() {
        let cfg = small_cfg(5, 3, 3, 2, 0.0);
        let w = zero_weights(cfg);
        let batch = ClassifyBatch {
            seqs: vec![vec![5]],
            labels: vec![0],
        };
        assert!(forward_classify(&w, &batch, Mode::Eval, None).is_err());
    }
}
