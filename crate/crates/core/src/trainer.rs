//! Contrastive refinement loop: intent-based batch sampling, per-batch
//! impact/segmentation recomputation, combined-loss backprop, Adam updates,
//! per-epoch validation scoring, and the frozen-parameter depth sweep.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

use crate::bteval::{score_corpus, segmentation_to_bt, Aggregation, MetricsReport};
use crate::contrastive::{
    crop_keep_indices, random_segmentation, seg_cl_on_tape, sent_cl_on_tape, ContrastiveBatch,
    SimReduction,
};
use crate::corpus::{derive_bt_gold, Corpus, Utterance, Vocab};
use crate::encoder::{
    encode_on_tape, init_params, save_checkpoint, EncoderConfig, EncoderParams,
};
use crate::error::{Error, Result};
use crate::probing::{
    build_tree, impact_matrix, segments_at_depth, BlockAgg, DistanceMetric, Segmentation,
};
use crate::tape::{NodeId, Tape};

/// When impact matrices (hence segmentations) are recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImpactCache {
    /// Fresh matrices for every batch (segmentations track every update).
    #[default]
    PerBatch,
    /// Matrices computed at first use each epoch and reused within it.
    PerEpoch,
}

impl FromStr for ImpactCache {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-batch" => Ok(ImpactCache::PerBatch),
            "per-epoch" => Ok(ImpactCache::PerEpoch),
            other => Err(Error::InvalidConfig(format!(
                "unknown impact cache mode `{other}` (per-batch | per-epoch)"
            ))),
        }
    }
}

/// Everything a training run depends on besides the two corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Segmentation depth used for losses and validation scoring.
    pub depth: usize,
    /// Fraction of segment rows removed by cropping.
    pub beta: f64,
    pub tau_s: f64,
    pub tau_d: f64,
    pub delta: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub block_agg: BlockAgg,
    pub sim_reduction: SimReduction,
    pub metric: DistanceMetric,
    pub cache_impact: ImpactCache,
    // Encoder shape; the vocabulary size comes from the training corpus.
    pub d_h: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            depth: 3,
            beta: 0.2,
            tau_s: 0.1,
            tau_d: 0.05,
            delta: 0.3,
            gamma: 0.7,
            batch_size: 16,
            learning_rate: 1e-5,
            epochs: 10,
            seed: 0,
            block_agg: BlockAgg::default(),
            sim_reduction: SimReduction::default(),
            metric: DistanceMetric::default(),
            cache_impact: ImpactCache::default(),
            d_h: 64,
            layers: 2,
            heads: 2,
            ffn_mult: 4,
            max_len: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::InvalidConfig("depth must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!(
                "beta must be in [0, 1), got {}",
                self.beta
            )));
        }
        if self.tau_s <= 0.0 || self.tau_d <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "temperatures must be > 0, got tau_s={} tau_d={}",
                self.tau_s, self.tau_d
            )));
        }
        if self.delta < 0.0 || self.gamma < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be >= 0, got delta={} gamma={}",
                self.delta, self.gamma
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        // Encoder shape checks run again inside EncoderConfig::validate.
        self.encoder_config(3).validate()
    }

    /// Encoder configuration for a given vocabulary size.
    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_h: self.d_h,
            layers: self.layers,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            max_len: self.max_len,
            seed: derive_seed(self.seed, &[TAG_INIT]),
        }
    }
}

/// Parses the flat `key = value` config format (`#` starts a comment).
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |e: &dyn std::fmt::Display| {
            Error::InvalidConfig(format!("line {}: bad value for `{key}`: {e}", lineno + 1))
        };
        macro_rules! num {
            () => {
                value.parse().map_err(|e| bad(&e))?
            };
        }
        match key {
            "depth" => cfg.depth = num!(),
            "beta" => cfg.beta = num!(),
            "tau_s" => cfg.tau_s = num!(),
            "tau_d" => cfg.tau_d = num!(),
            "delta" => cfg.delta = num!(),
            "gamma" => cfg.gamma = num!(),
            "batch_size" => cfg.batch_size = num!(),
            "learning_rate" => cfg.learning_rate = num!(),
            "epochs" => cfg.epochs = num!(),
            "seed" => cfg.seed = num!(),
            "block_agg" => cfg.block_agg = value.parse()?,
            "sim_reduction" => cfg.sim_reduction = value.parse()?,
            "metric" => cfg.metric = value.parse()?,
            "cache_impact" => cfg.cache_impact = value.parse()?,
            "d_h" => cfg.d_h = num!(),
            "layers" => cfg.layers = num!(),
            "heads" => cfg.heads = num!(),
            "ffn_mult" => cfg.ffn_mult = num!(),
            "max_len" => cfg.max_len = num!(),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "line {}: unknown config key `{other}`",
                    lineno + 1
                )))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Renders a config in the same flat format `parse_config` reads.
pub fn config_to_string(cfg: &TrainConfig) -> String {
    let block_agg = match cfg.block_agg {
        BlockAgg::Mean => "mean",
        BlockAgg::Sum => "sum",
    };
    let sim = match cfg.sim_reduction {
        SimReduction::Pool => "pool",
        SimReduction::MeanRowCos => "mean_rowcos",
    };
    let metric = match cfg.metric {
        DistanceMetric::Euclidean => "euclidean",
        DistanceMetric::OneMinusCosine => "one-minus-cosine",
    };
    let cache = match cfg.cache_impact {
        ImpactCache::PerBatch => "per-batch",
        ImpactCache::PerEpoch => "per-epoch",
    };
    format!(
        "depth = {}\nbeta = {}\ntau_s = {}\ntau_d = {}\ndelta = {}\ngamma = {}\n\
         batch_size = {}\nlearning_rate = {}\nepochs = {}\nseed = {}\n\
         block_agg = {}\nsim_reduction = {}\nmetric = {}\ncache_impact = {}\n\
         d_h = {}\nlayers = {}\nheads = {}\nffn_mult = {}\nmax_len = {}\n",
        cfg.depth,
        cfg.beta,
        cfg.tau_s,
        cfg.tau_d,
        cfg.delta,
        cfg.gamma,
        cfg.batch_size,
        cfg.learning_rate,
        cfg.epochs,
        cfg.seed,
        block_agg,
        sim,
        metric,
        cache,
        cfg.d_h,
        cfg.layers,
        cfg.heads,
        cfg.ffn_mult,
        cfg.max_len,
    )
}

/// Per-run training record; all per-epoch vectors have `epochs` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    /// Mean segment-level loss over anchors that had one (null if none).
    pub mean_l_s: Vec<Option<f64>>,
    pub mean_l_d: Vec<f64>,
    pub mean_total: Vec<f64>,
    pub valid_h_mean: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    /// Validation H-Mean of the untrained encoder (epoch 0).
    pub baseline_h_mean: f64,
    /// 1-based index of the best-validation epoch.
    pub best_epoch: usize,
    pub best_h_mean: f64,
    pub checkpoint_path: String,
    pub seed: u64,
}

// Seed-stream tags so every randomized decision draws from its own
// deterministic stream.
const TAG_INIT: u64 = 0x01;
const TAG_EPOCH: u64 = 0x02;
const TAG_RAND_SEG: u64 = 0x03;
const TAG_CROP: u64 = 0x04;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(base), |acc, &t| splitmix64(acc ^ t))
}

/// One epoch's batches: every utterance appears as an anchor exactly once
/// (seeded permutation), each anchor paired with a same-intent positive and
/// a different-intent negative.
pub fn epoch_batches(c: &Corpus, size: usize, seed: u64) -> Result<Vec<ContrastiveBatch>> {
    if size == 0 {
        return Err(Error::InvalidConfig("batch size must be >= 1".into()));
    }
    let n = c.utterances.len();
    if n == 0 {
        return Err(Error::InvalidConfig("cannot sample from an empty corpus".into()));
    }
    if c.intents().len() < 2 {
        return Err(Error::TooFewIntents {
            found: c.intents().len(),
        });
    }
    let mut same_intent: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, u) in c.utterances.iter().enumerate() {
        same_intent.entry(&u.intent).or_default().push(i);
    }
    let other_intent: HashMap<&str, Vec<usize>> = same_intent
        .keys()
        .map(|&intent| {
            let others = c
                .utterances
                .iter()
                .enumerate()
                .filter(|(_, u)| u.intent != intent)
                .map(|(i, _)| i)
                .collect();
            (intent, others)
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut batches = Vec::with_capacity(n.div_ceil(size));
    for chunk in order.chunks(size) {
        let mut batch = ContrastiveBatch {
            anchors: Vec::with_capacity(chunk.len()),
            positives: Vec::with_capacity(chunk.len()),
            negatives: Vec::with_capacity(chunk.len()),
        };
        for &a in chunk {
            let anchor = &c.utterances[a];
            let pool = &same_intent[anchor.intent.as_str()];
            let pos = if pool.len() == 1 {
                log::warn!(
                    "intent `{}` has a single utterance; anchor `{}` is its own positive",
                    anchor.intent,
                    anchor.id
                );
                a
            } else {
                let others: Vec<usize> = pool.iter().copied().filter(|&x| x != a).collect();
                others[rng.random_range(0..others.len())]
            };
            let negatives = &other_intent[anchor.intent.as_str()];
            let neg = negatives[rng.random_range(0..negatives.len())];
            batch.anchors.push(anchor.id.clone());
            batch.positives.push(c.utterances[pos].id.clone());
            batch.negatives.push(c.utterances[neg].id.clone());
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// First batch of a seeded epoch: `size` anchors without replacement.
pub fn sample_batch(c: &Corpus, size: usize, seed: u64) -> Result<ContrastiveBatch> {
    Ok(epoch_batches(c, size, seed)?.remove(0))
}

/// Segments an utterance with the current parameters: impact matrix →
/// greedy tree → frontier at `depth`.
pub fn segment_utterance(
    params: &EncoderParams,
    enc_cfg: &EncoderConfig,
    vocab: &Vocab,
    u: &Utterance,
    depth: usize,
    metric: DistanceMetric,
    agg: BlockAgg,
) -> Result<Segmentation> {
    let im = impact_matrix(params, enc_cfg, vocab, u, metric)?;
    let tree = build_tree(im.matrix(), depth, agg)?;
    segments_at_depth(&tree, depth)
}

/// Scores UPL segmentations at `depth` against gold boundaries.
pub fn evaluate_boundaries(
    params: &EncoderParams,
    enc_cfg: &EncoderConfig,
    vocab: &Vocab,
    corpus: &Corpus,
    depth: usize,
    metric: DistanceMetric,
    block_agg: BlockAgg,
    agg: Aggregation,
) -> Result<MetricsReport> {
    let mut preds = Vec::with_capacity(corpus.utterances.len());
    let mut golds = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        let seg = segment_utterance(params, enc_cfg, vocab, u, depth, metric, block_agg)?;
        preds.push(segmentation_to_bt(&seg, u.tokens.len())?);
        golds.push(derive_bt_gold(u));
    }
    score_corpus(&preds, &golds, agg)
}

/// Frozen-input plan for one anchor: fixed pairing, segmentations, random
/// negative segmentation, and crop row choices.
struct AnchorPlan {
    anchor: usize,
    positive: usize,
    negative: usize,
    seg_a: Segmentation,
    seg_p: Segmentation,
    seg_n: Segmentation,
    /// None when the anchor's segmentation is the unique one with its m.
    seg_r: Option<Segmentation>,
    keep_a: Vec<usize>,
    keep_p: Vec<usize>,
    keep_n: Vec<usize>,
}

struct BatchStats {
    sum_l_s: f64,
    n_l_s: usize,
    sum_l_d: f64,
    sum_total: f64,
    n: usize,
}

/// Node pair (cls, hidden) for one utterance encoded on the current tape.
type EncodedNodes = (NodeId, NodeId);

fn encode_cached(
    tape: &mut Tape,
    nodes: &crate::encoder::ParamNodes,
    enc_cfg: &EncoderConfig,
    vocab: &Vocab,
    u: &Utterance,
    cache: &mut HashMap<usize, EncodedNodes>,
    idx: usize,
) -> Result<EncodedNodes> {
    if let Some(&hit) = cache.get(&idx) {
        return Ok(hit);
    }
    let ids = vocab.encode(&u.tokens);
    let pair = encode_on_tape(tape, nodes, enc_cfg, &ids, &std::collections::BTreeSet::new())?;
    cache.insert(idx, pair);
    Ok(pair)
}

/// Evaluates one planned batch on a fresh tape; returns the loss, gradients
/// in canonical parameter order, and per-anchor statistics.
#[allow(clippy::too_many_arguments)]
fn evaluate_plan(
    params: &EncoderParams,
    enc_cfg: &EncoderConfig,
    vocab: &Vocab,
    corpus: &Corpus,
    plans: &[AnchorPlan],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Option<Array2<f64>>>, BatchStats)> {
    let mut tape = Tape::new();
    let nodes = params.to_tape(&mut tape);
    let mut encoded: HashMap<usize, EncodedNodes> = HashMap::new();
    let mut terms: Vec<(NodeId, f64)> = Vec::new();
    let mut stats = BatchStats {
        sum_l_s: 0.0,
        n_l_s: 0,
        sum_l_d: 0.0,
        sum_total: 0.0,
        n: plans.len(),
    };
    let n = plans.len() as f64;
    for plan in plans {
        let (cls_a, hid_a) = encode_cached(
            &mut tape, &nodes, enc_cfg, vocab, &corpus.utterances[plan.anchor], &mut encoded,
            plan.anchor,
        )?;
        let (_, hid_p) = encode_cached(
            &mut tape, &nodes, enc_cfg, vocab, &corpus.utterances[plan.positive], &mut encoded,
            plan.positive,
        )?;
        let (_, hid_n) = encode_cached(
            &mut tape, &nodes, enc_cfg, vocab, &corpus.utterances[plan.negative], &mut encoded,
            plan.negative,
        )?;

        let pooled_a = tape.mean_rows_spans(hid_a, &plan.seg_a.spans);
        let pooled_p = tape.mean_rows_spans(hid_p, &plan.seg_p.spans);
        let pooled_n = tape.mean_rows_spans(hid_n, &plan.seg_n.spans);

        let mut anchor_total = 0.0;
        if let Some(seg_r) = &plan.seg_r {
            let pooled_r = tape.mean_rows_spans(hid_a, &seg_r.spans);
            let l_s = seg_cl_on_tape(
                &mut tape, cls_a, pooled_a, pooled_r, cfg.tau_s, cfg.sim_reduction,
            );
            terms.push((l_s, cfg.delta / n));
            let v = tape.scalar(l_s);
            stats.sum_l_s += v;
            stats.n_l_s += 1;
            anchor_total += cfg.delta * v;
        }
        let crop_a = tape.gather_rows(pooled_a, &plan.keep_a);
        let crop_p = tape.gather_rows(pooled_p, &plan.keep_p);
        let crop_n = tape.gather_rows(pooled_n, &plan.keep_n);
        let l_d = sent_cl_on_tape(
            &mut tape, crop_a, crop_p, crop_n, cfg.tau_d, cfg.sim_reduction,
        );
        terms.push((l_d, cfg.gamma / n));
        let v = tape.scalar(l_d);
        stats.sum_l_d += v;
        anchor_total += cfg.gamma * v;
        stats.sum_total += anchor_total;
    }
    let root = tape.weighted_sum(&terms);
    let loss = tape.scalar(root);
    let mut grads = tape.backward(root);
    let out = nodes
        .named()
        .iter()
        .map(|(_, id)| grads.take(*id))
        .collect();
    Ok((loss, out, stats))
}

/// Adam optimizer state over the canonical parameter array order.
struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
}

impl Adam {
    fn new(params: &EncoderParams, lr: f64) -> Self {
        let shapes: Vec<_> = params.arrays().iter().map(|(_, a)| a.dim()).collect();
        Adam {
            m: shapes.iter().map(|&d| Array2::zeros(d)).collect(),
            v: shapes.iter().map(|&d| Array2::zeros(d)).collect(),
            t: 0,
            lr,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
        }
    }

    fn step(&mut self, params: &mut EncoderParams, grads: &[Option<Array2<f64>>]) {
        self.t += 1;
        let bc1 = 1.0 - self.b1.powi(self.t as i32);
        let bc2 = 1.0 - self.b2.powi(self.t as i32);
        for (i, (_, p)) in params.arrays_mut().into_iter().enumerate() {
            let zero;
            let g = match &grads[i] {
                Some(g) => g,
                None => {
                    zero = Array2::zeros(p.dim());
                    &zero
                }
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = self.b1 * *m + (1.0 - self.b1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.b2 * *v + (1.0 - self.b2) * g * g);
            for ((p, &m), &v) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn plan_batch(
    params: &EncoderParams,
    enc_cfg: &EncoderConfig,
    vocab: &Vocab,
    corpus: &Corpus,
    index_of: &HashMap<&str, usize>,
    batch: &ContrastiveBatch,
    cfg: &TrainConfig,
    seg_cache: &mut HashMap<usize, Segmentation>,
    fresh_segs: bool,
    epoch: usize,
    batch_idx: usize,
) -> Result<Vec<AnchorPlan>> {
    if fresh_segs {
        seg_cache.clear();
    }
    let resolve = |id: &str| -> Result<usize> {
        index_of
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownUtterance(id.to_string()))
    };
    let mut plans = Vec::with_capacity(batch.anchors.len());
    for (slot, anchor_id) in batch.anchors.iter().enumerate() {
        let a = resolve(anchor_id)?;
        let p = resolve(&batch.positives[slot])?;
        let ng = resolve(&batch.negatives[slot])?;
        for idx in [a, p, ng] {
            if !seg_cache.contains_key(&idx) {
                let seg = segment_utterance(
                    params, enc_cfg, vocab, &corpus.utterances[idx], cfg.depth, cfg.metric,
                    cfg.block_agg,
                )?;
                seg_cache.insert(idx, seg);
            }
        }
        let seg_a = seg_cache[&a].clone();
        let seg_p = seg_cache[&p].clone();
        let seg_n = seg_cache[&ng].clone();
        let t = corpus.utterances[a].tokens.len();
        let rand_seed = derive_seed(
            cfg.seed,
            &[TAG_RAND_SEG, epoch as u64, batch_idx as u64, slot as u64],
        );
        let seg_r = random_segmentation(t, seg_a.m(), rand_seed, Some(&seg_a.cut_set()))?;
        let crop = |role: u64, m: usize| -> Result<Vec<usize>> {
            crop_keep_indices(
                m,
                cfg.beta,
                derive_seed(
                    cfg.seed,
                    &[TAG_CROP, epoch as u64, batch_idx as u64, slot as u64, role],
                ),
            )
        };
        plans.push(AnchorPlan {
            anchor: a,
            positive: p,
            negative: ng,
            keep_a: crop(0, seg_a.m())?,
            keep_p: crop(1, seg_p.m())?,
            keep_n: crop(2, seg_n.m())?,
            seg_a,
            seg_p,
            seg_n,
            seg_r,
        });
    }
    Ok(plans)
}

/// Runs the refinement loop and saves the best-validation checkpoint.
///
/// Returns the report and the best parameters (also written to
/// `checkpoint_path`).
pub fn train(
    c_train: &Corpus,
    c_valid: &Corpus,
    cfg: &TrainConfig,
    checkpoint_path: &Path,
) -> Result<(TrainReport, EncoderParams)> {
    cfg.validate()?;
    if c_train.utterances.is_empty() || c_valid.utterances.is_empty() {
        return Err(Error::InvalidConfig(
            "both training and validation splits must be nonempty".into(),
        ));
    }
    let longest = c_train.max_tokens().max(c_valid.max_tokens());
    if longest + 1 > cfg.max_len {
        return Err(Error::SequenceTooLong {
            len: longest,
            max_len: cfg.max_len,
        });
    }
    let vocab = c_train.vocab().clone();
    let enc_cfg = cfg.encoder_config(vocab.len());
    let mut params = init_params(&enc_cfg)?;
    let index_of: HashMap<&str, usize> = c_train
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| (u.id.as_str(), i))
        .collect();

    let baseline = evaluate_boundaries(
        &params, &enc_cfg, &vocab, c_valid, cfg.depth, cfg.metric, cfg.block_agg,
        Aggregation::Micro,
    )?;
    log::info!("epoch 0 validation H-Mean: {:.4}", baseline.h_mean);

    let mut adam = Adam::new(&params, cfg.learning_rate);
    let mut report = TrainReport {
        epochs: cfg.epochs,
        mean_l_s: Vec::with_capacity(cfg.epochs),
        mean_l_d: Vec::with_capacity(cfg.epochs),
        mean_total: Vec::with_capacity(cfg.epochs),
        valid_h_mean: Vec::with_capacity(cfg.epochs),
        epoch_seconds: Vec::with_capacity(cfg.epochs),
        baseline_h_mean: baseline.h_mean,
        best_epoch: 0,
        best_h_mean: f64::NEG_INFINITY,
        checkpoint_path: checkpoint_path.display().to_string(),
        seed: cfg.seed,
    };
    let mut best_params = params.clone();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let batches = epoch_batches(
            c_train,
            cfg.batch_size,
            derive_seed(cfg.seed, &[TAG_EPOCH, epoch as u64]),
        )?;
        let mut seg_cache: HashMap<usize, Segmentation> = HashMap::new();
        let mut sum_l_s = 0.0;
        let mut n_l_s = 0usize;
        let mut sum_l_d = 0.0;
        let mut sum_total = 0.0;
        let mut n_anchors = 0usize;
        for (batch_idx, batch) in batches.iter().enumerate() {
            let plans = plan_batch(
                &params,
                &enc_cfg,
                &vocab,
                c_train,
                &index_of,
                batch,
                cfg,
                &mut seg_cache,
                cfg.cache_impact == ImpactCache::PerBatch,
                epoch,
                batch_idx,
            )?;
            let (loss, grads, stats) =
                evaluate_plan(&params, &enc_cfg, &vocab, c_train, &plans, cfg)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            adam.step(&mut params, &grads);
            sum_l_s += stats.sum_l_s;
            n_l_s += stats.n_l_s;
            sum_l_d += stats.sum_l_d;
            sum_total += stats.sum_total;
            n_anchors += stats.n;
        }
        let valid = evaluate_boundaries(
            &params, &enc_cfg, &vocab, c_valid, cfg.depth, cfg.metric, cfg.block_agg,
            Aggregation::Micro,
        )?;
        report
            .mean_l_s
            .push((n_l_s > 0).then(|| sum_l_s / n_l_s as f64));
        report.mean_l_d.push(sum_l_d / n_anchors as f64);
        report.mean_total.push(sum_total / n_anchors as f64);
        report.valid_h_mean.push(valid.h_mean);
        report.epoch_seconds.push(started.elapsed().as_secs_f64());
        log::info!(
            "epoch {epoch}: mean loss {:.6}, validation H-Mean {:.4}",
            sum_total / n_anchors as f64,
            valid.h_mean
        );
        if valid.h_mean > report.best_h_mean {
            report.best_h_mean = valid.h_mean;
            report.best_epoch = epoch;
            best_params = params.clone();
        }
    }
    save_checkpoint(checkpoint_path, &enc_cfg, &best_params, &vocab)?;
    Ok((report, best_params))
}

/// Scores each depth with frozen parameters; returns the best depth (ties
/// to the smaller one) and the per-depth H-Mean table.
pub fn tune_depth(
    params: &EncoderParams,
    enc_cfg: &EncoderConfig,
    vocab: &Vocab,
    c_valid: &Corpus,
    metric: DistanceMetric,
    block_agg: BlockAgg,
    depths: &[usize],
) -> Result<(usize, Vec<(usize, f64)>)> {
    if depths.is_empty() {
        return Err(Error::InvalidConfig("depth sweep range is empty".into()));
    }
    let mut table = Vec::with_capacity(depths.len());
    for &d in depths {
        let r = evaluate_boundaries(
            params, enc_cfg, vocab, c_valid, d, metric, block_agg, Aggregation::Micro,
        )?;
        table.push((d, r.h_mean));
    }
    let mut best = table[0];
    for &(d, h) in &table[1..] {
        if h > best.1 || (h == best.1 && d < best.0) {
            best = (d, h);
        }
    }
    Ok((best.0, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_jsonl;
    use crate::synth::build_synthetic_corpus;
    use std::io::Write;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            depth: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            epochs: 2,
            seed: 11,
            d_h: 8,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            max_len: 16,
            ..TrainConfig::default()
        }
    }

    fn tiny_split() -> (Corpus, Corpus) {
        let c = build_synthetic_corpus(28, 5).unwrap();
        let (valid, train): (Vec<_>, Vec<_>) = c
            .utterances
            .iter()
            .cloned()
            .enumerate()
            .partition(|(i, _)| i % 4 == 0);
        let strip = |v: Vec<(usize, Utterance)>| v.into_iter().map(|(_, u)| u).collect();
        (
            Corpus::from_utterances(strip(train)),
            Corpus::from_utterances(strip(valid)),
        )
    }

    #[test]
    fn config_parse_round_trip_and_errors() {
        let cfg = TrainConfig {
            depth: 4,
            beta: 0.25,
            tau_s: 0.05,
            tau_d: 0.1,
            delta: 1.0,
            gamma: 0.2,
            batch_size: 16,
            learning_rate: 1e-5,
            epochs: 10,
            seed: 9,
            block_agg: BlockAgg::Sum,
            sim_reduction: SimReduction::MeanRowCos,
            metric: DistanceMetric::OneMinusCosine,
            cache_impact: ImpactCache::PerEpoch,
            ..TrainConfig::default()
        };
        let text = config_to_string(&cfg);
        assert_eq!(parse_config(&text).unwrap(), cfg);

        let with_noise = format!("# leading comment\n\n{text}\ndepth = 4  # trailing comment\n");
        assert_eq!(parse_config(&with_noise).unwrap(), cfg);

        assert!(matches!(
            parse_config("unknown_key = 1"),
            Err(Error::InvalidConfig(m)) if m.contains("unknown_key")
        ));
        assert!(parse_config("depth").is_err());
        assert!(parse_config("beta = high").is_err());
        assert!(parse_config("beta = 1.5").is_err());
        assert!(parse_config("epochs = 0").is_err());
    }

    #[test]
    fn batches_pair_by_intent_and_cover_each_anchor_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        for (id, intent) in [("a1", "A"), ("a2", "A"), ("b1", "B"), ("b2", "B")] {
            writeln!(
                f,
                r#"{{"id":"{id}","tokens":["x","y"],"slots":["O","O"],"intent":"{intent}"}}"#
            )
            .unwrap();
        }
        drop(f);
        let c = load_jsonl(&path).unwrap();

        let batch = sample_batch(&c, 2, 3).unwrap();
        assert_eq!(batch.anchors.len(), 2);
        for i in 0..2 {
            let a = c.by_id(&batch.anchors[i]).unwrap();
            let p = c.by_id(&batch.positives[i]).unwrap();
            let n = c.by_id(&batch.negatives[i]).unwrap();
            assert_eq!(a.intent, p.intent);
            assert_ne!(a.id, p.id);
            assert_ne!(a.intent, n.intent);
        }
        assert_eq!(sample_batch(&c, 2, 3).unwrap(), batch);

        let all = epoch_batches(&c, 3, 8).unwrap();
        let mut anchors: Vec<String> = all.iter().flat_map(|b| b.anchors.clone()).collect();
        anchors.sort();
        assert_eq!(anchors, vec!["a1", "a2", "b1", "b2"]);
    }

    #[test]
    fn singleton_intent_falls_back_to_self_positive() {
        let utts = vec![
            Utterance {
                id: "solo".into(),
                tokens: vec!["x".into()],
                slots: vec!["O".into()],
                intent: "lonely".into(),
            },
            Utterance {
                id: "other".into(),
                tokens: vec!["y".into()],
                slots: vec!["O".into()],
                intent: "crowded".into(),
            },
        ];
        let c = Corpus::from_utterances(utts);
        let batch = sample_batch(&c, 2, 0).unwrap();
        for i in 0..2 {
            assert_eq!(batch.positives[i], batch.anchors[i]);
        }
    }

    #[test]
    fn single_intent_corpus_rejected() {
        let utts = vec![Utterance {
            id: "u1".into(),
            tokens: vec!["x".into()],
            slots: vec!["O".into()],
            intent: "only".into(),
        }];
        let c = Corpus::from_utterances(utts);
        assert!(matches!(
            sample_batch(&c, 1, 0),
            Err(Error::TooFewIntents { found: 1 })
        ));
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let (train_c, valid_c) = tiny_split();
        let cfg = TrainConfig {
            delta: 0.0,
            gamma: 0.0,
            epochs: 1,
            ..tiny_cfg()
        };
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("zero.ckpt");
        let (_, best) = train(&train_c, &valid_c, &cfg, &ckpt).unwrap();
        let fresh = init_params(&cfg.encoder_config(train_c.vocab().len())).unwrap();
        for ((name_a, a), (name_b, b)) in best.arrays().iter().zip(fresh.arrays().iter()) {
            assert_eq!(name_a, name_b);
            assert_eq!(a, b, "{name_a} changed despite zero loss weights");
        }
    }

    #[test]
    fn training_is_deterministic_and_checkpoint_reproduces_validation() {
        let (train_c, valid_c) = tiny_split();
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let (r1, best) = train(&train_c, &valid_c, &cfg, &dir.path().join("a.ckpt")).unwrap();
        let (r2, _) = train(&train_c, &valid_c, &cfg, &dir.path().join("b.ckpt")).unwrap();
        assert_eq!(r1.mean_l_s, r2.mean_l_s);
        assert_eq!(r1.mean_l_d, r2.mean_l_d);
        assert_eq!(r1.mean_total, r2.mean_total);
        assert_eq!(r1.valid_h_mean, r2.valid_h_mean);
        assert_eq!(r1.best_epoch, r2.best_epoch);
        assert!(r1.mean_l_d.iter().all(|v| v.is_finite()));
        assert_eq!(r1.valid_h_mean.len(), cfg.epochs);

        // Reloading the checkpoint reproduces the recorded best H-Mean.
        let (enc_cfg, loaded, vocab) =
            crate::encoder::load_checkpoint(&dir.path().join("a.ckpt")).unwrap();
        for ((_, a), (_, b)) in loaded.arrays().iter().zip(best.arrays().iter()) {
            assert_eq!(a, b);
        }
        let r = evaluate_boundaries(
            &loaded, &enc_cfg, &vocab, &valid_c, cfg.depth, cfg.metric, cfg.block_agg,
            Aggregation::Micro,
        )
        .unwrap();
        assert_eq!(r.h_mean, r1.best_h_mean);
    }

    #[test]
    fn per_epoch_cache_runs_and_differs_from_per_batch() {
        let (train_c, valid_c) = tiny_split();
        let cfg = TrainConfig {
            cache_impact: ImpactCache::PerEpoch,
            epochs: 1,
            ..tiny_cfg()
        };
        let dir = tempfile::tempdir().unwrap();
        let (r, _) = train(&train_c, &valid_c, &cfg, &dir.path().join("c.ckpt")).unwrap();
        assert_eq!(r.mean_total.len(), 1);
        assert!(r.mean_total[0].is_finite());
    }

    #[test]
    fn huge_learning_rate_aborts_with_batch_id() {
        let (train_c, valid_c) = tiny_split();
        let cfg = TrainConfig {
            learning_rate: 1e300,
            epochs: 2,
            ..tiny_cfg()
        };
        let dir = tempfile::tempdir().unwrap();
        let err = train(&train_c, &valid_c, &cfg, &dir.path().join("d.ckpt")).unwrap_err();
        match err {
            Error::NonFiniteLoss { .. } | Error::NonFinite(_) | Error::ImpactFormat(_) => {}
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn depth_sweep_matches_direct_evaluation_and_prefers_smaller_ties() {
        let (_, valid_c) = tiny_split();
        let cfg = tiny_cfg();
        let enc_cfg = cfg.encoder_config(valid_c.vocab().len());
        let params = init_params(&enc_cfg).unwrap();
        let vocab = valid_c.vocab().clone();
        let (best, table) = tune_depth(
            &params, &enc_cfg, &vocab, &valid_c, cfg.metric, cfg.block_agg, &[1, 2, 3],
        )
        .unwrap();
        assert_eq!(table.len(), 3);
        for &(d, h) in &table {
            let direct = evaluate_boundaries(
                &params, &enc_cfg, &vocab, &valid_c, d, cfg.metric, cfg.block_agg,
                Aggregation::Micro,
            )
            .unwrap();
            assert_eq!(h, direct.h_mean);
        }
        // Independent argmax with ties to the smaller depth.
        let mut want = table[0];
        for &(d, h) in &table[1..] {
            if h > want.1 {
                want = (d, h);
            }
        }
        assert_eq!(best, want.0);

        let (only, t1) = tune_depth(
            &params, &enc_cfg, &vocab, &valid_c, cfg.metric, cfg.block_agg, &[1],
        )
        .unwrap();
        assert_eq!(only, 1);
        assert_eq!(t1.len(), 1);
        assert!(tune_depth(
            &params, &enc_cfg, &vocab, &valid_c, cfg.metric, cfg.block_agg, &[]
        )
        .is_err());
    }
}
