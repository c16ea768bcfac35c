//! Python bindings for the slot-boundary induction library.
//!
//! Exposes the main pipeline pieces to Python: corpus loading and synthesis,
//! a trainable `Encoder` with perturbed-masking probes, segmentation from
//! impact matrices, contrastive-loss scalars, Break-Tie conversion and
//! scoring, and a file-based training entry point.

use std::collections::BTreeSet;
use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use slotforge_core::bteval;
use slotforge_core::contrastive;
use slotforge_core::corpus::{self, BtLabel, BtSequence, Utterance, Vocab};
use slotforge_core::encoder::{self, EncoderConfig, EncoderParams};
use slotforge_core::probing;
use slotforge_core::synth;
use slotforge_core::tape;
use slotforge_core::trainer;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_array2(name: &str, rows: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    if rows.is_empty() {
        return Err(err(format!("{name} must have at least one row")));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(err(format!("{name} rows differ in length")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat).map_err(err)
}

fn array2_to_vecs(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn spans_from_py(spans: Vec<Vec<usize>>) -> PyResult<Vec<(usize, usize)>> {
    spans
        .into_iter()
        .map(|s| match s.as_slice() {
            [a, b] => Ok((*a, *b)),
            other => Err(err(format!(
                "each span must be a (start, end) pair, got {} elements",
                other.len()
            ))),
        })
        .collect()
}

fn segmentation_from_spans(spans: Vec<Vec<usize>>) -> PyResult<probing::Segmentation> {
    Ok(probing::Segmentation {
        spans: spans_from_py(spans)?,
        provenance: probing::Provenance::External,
    })
}

fn labels_to_py(seq: &BtSequence) -> Vec<String> {
    seq.labels.iter().map(|l| l.to_string()).collect()
}

fn labels_from_py(labels: &[String]) -> PyResult<BtSequence> {
    let labels = labels
        .iter()
        .map(|s| match s.as_str() {
            "B" => Ok(BtLabel::Break),
            "T" => Ok(BtLabel::Tie),
            "NA" => Ok(BtLabel::Na),
            other => Err(err(format!("unknown boundary label `{other}` (B | T | NA)"))),
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok(BtSequence { labels })
}

fn counts_to_dict<'py>(py: Python<'py>, c: &bteval::Counts) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("tp_b", c.tp_b)?;
    d.set_item("fp_b", c.fp_b)?;
    d.set_item("fn_b", c.fn_b)?;
    d.set_item("tp_t", c.tp_t)?;
    d.set_item("fp_t", c.fp_t)?;
    d.set_item("fn_t", c.fn_t)?;
    d.set_item("n_boundaries_scored", c.n_boundaries_scored)?;
    Ok(d)
}

fn report_to_dict<'py>(py: Python<'py>, r: &bteval::MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("b_p", r.b_p)?;
    d.set_item("b_r", r.b_r)?;
    d.set_item("b_f1", r.b_f1)?;
    d.set_item("t_p", r.t_p)?;
    d.set_item("t_r", r.t_r)?;
    d.set_item("t_f1", r.t_f1)?;
    d.set_item("h_mean", r.h_mean)?;
    d.set_item("counts", counts_to_dict(py, &r.counts)?)?;
    Ok(d)
}

/// Tokens arriving from Python go through the same normalization as JSONL
/// corpus loading.
fn utterance_from_tokens(tokens: Vec<String>) -> Utterance {
    let tokens: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
    let slots = vec!["O".to_string(); tokens.len()];
    Utterance {
        id: "adhoc".to_string(),
        tokens,
        slots,
        intent: String::new(),
    }
}

/// Loads a JSONL corpus and returns its utterances as dictionaries.
#[pyfunction]
fn load_corpus<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let corpus = corpus::load_jsonl(&path).map_err(err)?;
    corpus
        .utterances
        .iter()
        .map(|u| {
            let d = PyDict::new(py);
            d.set_item("id", &u.id)?;
            d.set_item("tokens", &u.tokens)?;
            d.set_item("slots", &u.slots)?;
            d.set_item("intent", &u.intent)?;
            Ok(d)
        })
        .collect()
}

/// Writes a deterministic synthetic corpus of `n` utterances to `path`.
#[pyfunction]
fn write_synthetic_corpus(path: PathBuf, n: usize, seed: u64) -> PyResult<()> {
    synth::write_synthetic_corpus(&path, n, seed).map_err(err)?;
    Ok(())
}

/// Assigns intents of the corpus at `path` to two disjoint partitions.
#[pyfunction]
fn split_by_intent<'py>(
    py: Python<'py>,
    path: PathBuf,
    ratio: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let corpus = corpus::load_jsonl(&path).map_err(err)?;
    let spec = corpus::split_by_intent(&corpus, ratio, seed).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("p1_intents", spec.p1_intents.iter().collect::<Vec<_>>())?;
    d.set_item("p2_intents", spec.p2_intents.iter().collect::<Vec<_>>())?;
    d.set_item("ratio", spec.ratio)?;
    d.set_item("seed", spec.seed)?;
    Ok(d)
}

/// Derives gold Break/Tie/NA boundary labels from BIO slot tags.
#[pyfunction]
fn derive_bt_gold(slots: Vec<String>) -> PyResult<Vec<String>> {
    corpus::validate_bio(&slots).map_err(err)?;
    let u = Utterance {
        id: "adhoc".to_string(),
        tokens: vec!["x".to_string(); slots.len()],
        slots,
        intent: String::new(),
    };
    Ok(labels_to_py(&corpus::derive_bt_gold(&u)))
}

/// Flattens spans over `t` tokens into T-1 Break/Tie boundary labels.
#[pyfunction]
fn segmentation_to_bt(spans: Vec<Vec<usize>>, t: usize) -> PyResult<Vec<String>> {
    let seg = segmentation_from_spans(spans)?;
    Ok(labels_to_py(&bteval::segmentation_to_bt(&seg, t).map_err(err)?))
}

/// Scores one utterance's predicted boundary labels against gold labels.
#[pyfunction]
fn score_bt<'py>(
    py: Python<'py>,
    pred: Vec<String>,
    gold: Vec<String>,
) -> PyResult<Bound<'py, PyDict>> {
    let counts =
        bteval::score_bt(&labels_from_py(&pred)?, &labels_from_py(&gold)?).map_err(err)?;
    counts_to_dict(py, &counts)
}

/// Corpus-level precision/recall/F1 for Break and Tie plus their harmonic
/// mean; `aggregation` is "micro" (summed counts) or "macro".
#[pyfunction]
#[pyo3(signature = (preds, golds, aggregation = "micro"))]
fn score_corpus<'py>(
    py: Python<'py>,
    preds: Vec<Vec<String>>,
    golds: Vec<Vec<String>>,
    aggregation: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let agg = match aggregation {
        "micro" => bteval::Aggregation::Micro,
        "macro" => bteval::Aggregation::Macro,
        other => return Err(err(format!("unknown aggregation `{other}` (micro | macro)"))),
    };
    let preds = preds
        .iter()
        .map(|p| labels_from_py(p))
        .collect::<PyResult<Vec<_>>>()?;
    let golds = golds
        .iter()
        .map(|g| labels_from_py(g))
        .collect::<PyResult<Vec<_>>>()?;
    let report = bteval::score_corpus(&preds, &golds, agg).map_err(err)?;
    report_to_dict(py, &report)
}

/// Harmonic mean of the Break and Tie F1 scores (0 when both are 0).
#[pyfunction]
fn h_mean(b_f1: f64, t_f1: f64) -> f64 {
    bteval::h_mean(b_f1, t_f1)
}

/// Numerically stable two-candidate InfoNCE: softplus((s_neg - s_pos) / tau).
#[pyfunction]
fn infonce(s_pos: f64, s_neg: f64, tau: f64) -> f64 {
    tape::infonce_k(s_pos, s_neg, tau)
}

/// Similarity between two segment matrices; `reduction` is "pool"
/// (cosine of mean-pooled vectors) or "mean_rowcos" (mean pairwise cosine).
#[pyfunction]
#[pyo3(signature = (a, b, reduction = "pool"))]
fn matrix_similarity(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, reduction: &str) -> PyResult<f64> {
    let red: contrastive::SimReduction = reduction.parse().map_err(err)?;
    let a = to_array2("a", &a)?;
    let b = to_array2("b", &b)?;
    contrastive::matrix_similarity(&a, &b, red).map_err(err)
}

/// Samples a uniform random segmentation of `t` tokens into `m` spans.
///
/// With `avoid_cuts` given, returns None when the only possible segmentation
/// is exactly the avoided one (or after too many resampling collisions).
#[pyfunction]
#[pyo3(signature = (t, m, seed, avoid_cuts = None))]
fn random_segmentation(
    t: usize,
    m: usize,
    seed: u64,
    avoid_cuts: Option<Vec<usize>>,
) -> PyResult<Option<Vec<(usize, usize)>>> {
    let avoid: Option<BTreeSet<usize>> = avoid_cuts.map(|v| v.into_iter().collect());
    let seg = contrastive::random_segmentation(t, m, seed, avoid.as_ref()).map_err(err)?;
    Ok(seg.map(|s| s.spans))
}

/// Sorted row indices kept after removing ceil(beta * m) of m rows (at least
/// one row always survives).
#[pyfunction]
fn crop_keep_indices(m: usize, beta: f64, seed: u64) -> PyResult<Vec<usize>> {
    contrastive::crop_keep_indices(m, beta, seed).map_err(err)
}

/// Left- or right-branching segmentation baseline; `side` is "lb" or "rb".
#[pyfunction]
fn branching_baseline(t: usize, depth: usize, side: &str) -> PyResult<Vec<(usize, usize)>> {
    let side: probing::BranchSide = side.parse().map_err(err)?;
    Ok(probing::branching_baseline(t, depth, side).spans)
}

/// Segments a raw impact matrix: greedy cut tree, frontier at `depth`.
#[pyfunction]
#[pyo3(signature = (f, depth, block_agg = "mean"))]
fn segment_matrix(
    f: Vec<Vec<f64>>,
    depth: usize,
    block_agg: &str,
) -> PyResult<Vec<(usize, usize)>> {
    let agg: probing::BlockAgg = block_agg.parse().map_err(err)?;
    let arr = to_array2("f", &f)?;
    let im = probing::ImpactMatrix::new("adhoc".to_string(), arr).map_err(err)?;
    let tree = probing::build_tree(im.matrix(), depth, agg).map_err(err)?;
    Ok(probing::segments_at_depth(&tree, depth).map_err(err)?.spans)
}

/// Trains the encoder on JSONL corpora with a flat `key = value` config file;
/// writes `encoder.ckpt` into `out_dir` and returns the training report.
#[pyfunction]
fn train_files<'py>(
    py: Python<'py>,
    train: PathBuf,
    valid: PathBuf,
    config: PathBuf,
    out_dir: PathBuf,
) -> PyResult<Bound<'py, PyDict>> {
    let text = std::fs::read_to_string(&config)
        .map_err(|e| err(format!("reading `{}`: {e}", config.display())))?;
    let cfg = trainer::parse_config(&text).map_err(err)?;
    let c_train = corpus::load_jsonl(&train).map_err(err)?;
    let c_valid = corpus::load_jsonl(&valid).map_err(err)?;
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| err(format!("creating `{}`: {e}", out_dir.display())))?;
    let ckpt = out_dir.join("encoder.ckpt");
    let (report, _params) = trainer::train(&c_train, &c_valid, &cfg, &ckpt).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("epochs", report.epochs)?;
    d.set_item("mean_l_s", &report.mean_l_s)?;
    d.set_item("mean_l_d", &report.mean_l_d)?;
    d.set_item("mean_total", &report.mean_total)?;
    d.set_item("valid_h_mean", &report.valid_h_mean)?;
    d.set_item("epoch_seconds", &report.epoch_seconds)?;
    d.set_item("baseline_h_mean", report.baseline_h_mean)?;
    d.set_item("best_epoch", report.best_epoch)?;
    d.set_item("best_h_mean", report.best_h_mean)?;
    d.set_item("checkpoint_path", &report.checkpoint_path)?;
    d.set_item("seed", report.seed)?;
    Ok(d)
}

/// A trainable contextual encoder bound to a vocabulary, probed with
/// perturbed masking to expose token-pair impacts and segmentations.
#[pyclass]
struct Encoder {
    cfg: EncoderConfig,
    params: EncoderParams,
    vocab: Vocab,
}

impl Encoder {
    fn ids(&self, tokens: Vec<String>) -> (Utterance, Vec<usize>) {
        let u = utterance_from_tokens(tokens);
        let ids = self.vocab.encode(&u.tokens);
        (u, ids)
    }
}

#[pymethods]
impl Encoder {
    /// Builds a freshly initialized encoder whose vocabulary comes from the
    /// JSONL corpus at `path`.
    #[staticmethod]
    #[pyo3(signature = (path, *, d_h = 64, layers = 2, heads = 2, ffn_mult = 4, max_len = 64, seed = 0))]
    fn from_corpus(
        path: PathBuf,
        d_h: usize,
        layers: usize,
        heads: usize,
        ffn_mult: usize,
        max_len: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let corpus = corpus::load_jsonl(&path).map_err(err)?;
        let vocab = corpus.vocab().clone();
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            d_h,
            layers,
            heads,
            ffn_mult,
            max_len,
            seed,
        };
        let params = encoder::init_params(&cfg).map_err(err)?;
        Ok(Encoder { cfg, params, vocab })
    }

    /// Loads a checkpoint written by `save` or by training.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (cfg, params, vocab) = encoder::load_checkpoint(&path).map_err(err)?;
        Ok(Encoder { cfg, params, vocab })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        encoder::save_checkpoint(&path, &self.cfg, &self.params, &self.vocab).map_err(err)
    }

    /// Runs the forward pass; returns (cls_vector, token_vectors). Positions
    /// listed in `masked` are replaced by the mask embedding.
    #[pyo3(signature = (tokens, masked = None))]
    fn encode(
        &self,
        tokens: Vec<String>,
        masked: Option<Vec<usize>>,
    ) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let (_u, ids) = self.ids(tokens);
        let masked: BTreeSet<usize> = masked.unwrap_or_default().into_iter().collect();
        let emb = encoder::encode(&self.params, &self.cfg, &ids, &masked).map_err(err)?;
        Ok((emb.cls.to_vec(), array2_to_vecs(&emb.hidden)))
    }

    /// T x T perturbed-masking impact matrix for the given tokens.
    #[pyo3(signature = (tokens, metric = "euclidean"))]
    fn impact_matrix(&self, tokens: Vec<String>, metric: &str) -> PyResult<Vec<Vec<f64>>> {
        let metric: probing::DistanceMetric = metric.parse().map_err(err)?;
        let (u, _ids) = self.ids(tokens);
        let im =
            probing::impact_matrix(&self.params, &self.cfg, &self.vocab, &u, metric).map_err(err)?;
        Ok(array2_to_vecs(im.matrix()))
    }

    /// Probes, builds the greedy cut tree, and returns the spans at `depth`.
    #[pyo3(signature = (tokens, depth, metric = "euclidean", block_agg = "mean"))]
    fn segment(
        &self,
        tokens: Vec<String>,
        depth: usize,
        metric: &str,
        block_agg: &str,
    ) -> PyResult<Vec<(usize, usize)>> {
        let metric: probing::DistanceMetric = metric.parse().map_err(err)?;
        let agg: probing::BlockAgg = block_agg.parse().map_err(err)?;
        let (u, _ids) = self.ids(tokens);
        let seg =
            trainer::segment_utterance(&self.params, &self.cfg, &self.vocab, &u, depth, metric, agg)
                .map_err(err)?;
        Ok(seg.spans)
    }

    #[getter]
    fn d_h(&self) -> usize {
        self.cfg.d_h
    }

    #[getter]
    fn layers(&self) -> usize {
        self.cfg.layers
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    #[getter]
    fn max_len(&self) -> usize {
        self.cfg.max_len
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    fn __repr__(&self) -> String {
        format!(
            "Encoder(d_h={}, layers={}, heads={}, vocab_size={}, max_len={}, seed={})",
            self.cfg.d_h,
            self.cfg.layers,
            self.cfg.heads,
            self.cfg.vocab_size,
            self.cfg.max_len,
            self.cfg.seed
        )
    }
}

#[pymodule]
fn slotforge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Encoder>()?;
    m.add_function(wrap_pyfunction!(load_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(split_by_intent, m)?)?;
    m.add_function(wrap_pyfunction!(derive_bt_gold, m)?)?;
    m.add_function(wrap_pyfunction!(segmentation_to_bt, m)?)?;
    m.add_function(wrap_pyfunction!(score_bt, m)?)?;
    m.add_function(wrap_pyfunction!(score_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(h_mean, m)?)?;
    m.add_function(wrap_pyfunction!(infonce, m)?)?;
    m.add_function(wrap_pyfunction!(matrix_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(random_segmentation, m)?)?;
    m.add_function(wrap_pyfunction!(crop_keep_indices, m)?)?;
    m.add_function(wrap_pyfunction!(branching_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(segment_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(train_files, m)?)?;
    Ok(())
}
