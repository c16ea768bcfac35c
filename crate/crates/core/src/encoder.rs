//! A miniature trainable contextual encoder.
//!
//! Multi-head self-attention blocks with residual connections, layer
//! normalization, GELU feed-forward layers, learned positional embeddings
//! and a prepended classification marker. The same forward definition runs
//! either directly or on a gradient [`Tape`], so taped and plain outputs are
//! bit-identical. Masked token positions have their input embedding replaced
//! by the mask marker's embedding.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Vocab, CLS_ID, MASK_ID};
use crate::error::{Error, Result};
use crate::tape::{MatOps, NodeId, Plain, Tape};

/// Architecture and initialization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_h: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Defaults (hidden width 64, 2 blocks, 2 heads, 4x feed-forward,
    /// max length 64) for a given vocabulary size.
    pub fn new(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_h: 64,
            layers: 2,
            heads: 2,
            ffn_mult: 4,
            max_len: 64,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_h / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::InvalidConfig(format!(
                "vocab_size must cover the 3 reserved markers, got {}",
                self.vocab_size
            )));
        }
        if self.d_h == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return Err(Error::InvalidConfig(
                "d_h, heads and ffn_mult must be positive".into(),
            ));
        }
        if self.d_h % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_h ({}) must be divisible by heads ({})",
                self.d_h, self.heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::InvalidConfig(format!(
                "max_len must allow at least one token plus the classification marker, got {}",
                self.max_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Array2<f64>,
    pub offset: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub bk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub ln_attn: LayerNormParams,
    pub w_ff1: Array2<f64>,
    pub b_ff1: Array2<f64>,
    pub w_ff2: Array2<f64>,
    pub b_ff2: Array2<f64>,
    pub ln_ffn: LayerNormParams,
}

/// All trainable weights of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub ln_emb: LayerNormParams,
    pub blocks: Vec<BlockParams>,
}

/// Structured handles to the parameter set under some engine (values,
/// tape nodes, ...). Field order here is the canonical parameter order.
pub(crate) struct LnRefs<M> {
    pub gain: M,
    pub offset: M,
}

pub(crate) struct BlockRefs<M> {
    pub wq: M,
    pub bq: M,
    pub wk: M,
    pub bk: M,
    pub wv: M,
    pub bv: M,
    pub wo: M,
    pub bo: M,
    pub ln_attn: LnRefs<M>,
    pub w_ff1: M,
    pub b_ff1: M,
    pub w_ff2: M,
    pub b_ff2: M,
    pub ln_ffn: LnRefs<M>,
}

pub(crate) struct ParamRefs<M> {
    pub tok_emb: M,
    pub pos_emb: M,
    pub ln_emb: LnRefs<M>,
    pub blocks: Vec<BlockRefs<M>>,
}

impl EncoderParams {
    /// Canonical traversal; every derived view (flat lists, tape nodes,
    /// shared-value refs) goes through this one function.
    pub(crate) fn map_refs<'a, M>(
        &'a self,
        f: &mut impl FnMut(String, &'a Array2<f64>) -> M,
    ) -> ParamRefs<M> {
        ParamRefs {
            tok_emb: f("tok_emb".into(), &self.tok_emb),
            pos_emb: f("pos_emb".into(), &self.pos_emb),
            ln_emb: LnRefs {
                gain: f("ln_emb.gain".into(), &self.ln_emb.gain),
                offset: f("ln_emb.offset".into(), &self.ln_emb.offset),
            },
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| BlockRefs {
                    wq: f(format!("block{i}.wq"), &b.wq),
                    bq: f(format!("block{i}.bq"), &b.bq),
                    wk: f(format!("block{i}.wk"), &b.wk),
                    bk: f(format!("block{i}.bk"), &b.bk),
                    wv: f(format!("block{i}.wv"), &b.wv),
                    bv: f(format!("block{i}.bv"), &b.bv),
                    wo: f(format!("block{i}.wo"), &b.wo),
                    bo: f(format!("block{i}.bo"), &b.bo),
                    ln_attn: LnRefs {
                        gain: f(format!("block{i}.ln_attn.gain"), &b.ln_attn.gain),
                        offset: f(format!("block{i}.ln_attn.offset"), &b.ln_attn.offset),
                    },
                    w_ff1: f(format!("block{i}.w_ff1"), &b.w_ff1),
                    b_ff1: f(format!("block{i}.b_ff1"), &b.b_ff1),
                    w_ff2: f(format!("block{i}.w_ff2"), &b.w_ff2),
                    b_ff2: f(format!("block{i}.b_ff2"), &b.b_ff2),
                    ln_ffn: LnRefs {
                        gain: f(format!("block{i}.ln_ffn.gain"), &b.ln_ffn.gain),
                        offset: f(format!("block{i}.ln_ffn.offset"), &b.ln_ffn.offset),
                    },
                })
                .collect(),
        }
    }

    /// Named parameter arrays in canonical order.
    pub fn arrays(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        self.map_refs(&mut |name, arr| out.push((name, arr)));
        out
    }

    /// Named mutable parameter arrays, same order as [`EncoderParams::arrays`].
    pub fn arrays_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, &mut Array2<f64>)> = Vec::new();
        out.push(("tok_emb".into(), &mut self.tok_emb));
        out.push(("pos_emb".into(), &mut self.pos_emb));
        out.push(("ln_emb.gain".into(), &mut self.ln_emb.gain));
        out.push(("ln_emb.offset".into(), &mut self.ln_emb.offset));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.wq"), &mut b.wq));
            out.push((format!("block{i}.bq"), &mut b.bq));
            out.push((format!("block{i}.wk"), &mut b.wk));
            out.push((format!("block{i}.bk"), &mut b.bk));
            out.push((format!("block{i}.wv"), &mut b.wv));
            out.push((format!("block{i}.bv"), &mut b.bv));
            out.push((format!("block{i}.wo"), &mut b.wo));
            out.push((format!("block{i}.bo"), &mut b.bo));
            out.push((format!("block{i}.ln_attn.gain"), &mut b.ln_attn.gain));
            out.push((format!("block{i}.ln_attn.offset"), &mut b.ln_attn.offset));
            out.push((format!("block{i}.w_ff1"), &mut b.w_ff1));
            out.push((format!("block{i}.b_ff1"), &mut b.b_ff1));
            out.push((format!("block{i}.w_ff2"), &mut b.w_ff2));
            out.push((format!("block{i}.b_ff2"), &mut b.b_ff2));
            out.push((format!("block{i}.ln_ffn.gain"), &mut b.ln_ffn.gain));
            out.push((format!("block{i}.ln_ffn.offset"), &mut b.ln_ffn.offset));
        }
        out
    }

    /// Parameter handles shared across many direct forward passes.
    pub(crate) fn plain_refs(&self) -> ParamRefs<Arc<Array2<f64>>> {
        self.map_refs(&mut |_, arr| Arc::new(arr.clone()))
    }

    /// Registers every parameter as a tape leaf.
    pub fn to_tape(&self, tape: &mut Tape) -> ParamNodes {
        let mut named = Vec::new();
        let refs = self.map_refs(&mut |name, arr| {
            let id = tape.leaf(arr.clone());
            named.push((name, id));
            id
        });
        ParamNodes { refs, named }
    }

    pub fn all_finite(&self) -> bool {
        self.arrays()
            .iter()
            .all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }
}

/// Tape leaves for every encoder parameter, in canonical order.
pub struct ParamNodes {
    pub(crate) refs: ParamRefs<NodeId>,
    named: Vec<(String, NodeId)>,
}

impl ParamNodes {
    pub fn named(&self) -> &[(String, NodeId)] {
        &self.named
    }

    pub fn get(&self, name: &str) -> Option<NodeId> {
        self.named
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
    }
}

/// Final-layer outputs for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings {
    /// Output at position 0, the prepended classification marker.
    pub cls: Array1<f64>,
    /// T x d_h final-layer vectors of the actual tokens.
    pub hidden: Array2<f64>,
}

/// Draws parameters from seeded uniform distributions scaled by
/// `1/sqrt(fan_in)`; biases start at zero, normalization at identity.
pub fn init_params(cfg: &EncoderConfig) -> Result<EncoderParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut uniform = |rows: usize, cols: usize, fan_in: usize| -> Array2<f64> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
    };
    let d = cfg.d_h;
    let ff = cfg.d_h * cfg.ffn_mult;
    let ln = || LayerNormParams {
        gain: Array2::ones((1, d)),
        offset: Array2::zeros((1, d)),
    };
    let tok_emb = uniform(cfg.vocab_size, d, d);
    let pos_emb = uniform(cfg.max_len, d, d);
    let blocks = (0..cfg.layers)
        .map(|_| BlockParams {
            wq: uniform(d, d, d),
            bq: Array2::zeros((1, d)),
            wk: uniform(d, d, d),
            bk: Array2::zeros((1, d)),
            wv: uniform(d, d, d),
            bv: Array2::zeros((1, d)),
            wo: uniform(d, d, d),
            bo: Array2::zeros((1, d)),
            ln_attn: ln(),
            w_ff1: uniform(d, ff, d),
            b_ff1: Array2::zeros((1, ff)),
            w_ff2: uniform(ff, d, ff),
            b_ff2: Array2::zeros((1, d)),
            ln_ffn: ln(),
        })
        .collect();
    Ok(EncoderParams {
        tok_emb,
        pos_emb,
        ln_emb: ln(),
        blocks,
    })
}

/// Maps token ids + mask set to embedding-table row indices, with the
/// classification marker prepended at position 0.
fn input_rows(
    cfg: &EncoderConfig,
    token_ids: &[usize],
    masked: &BTreeSet<usize>,
) -> Result<Vec<usize>> {
    let t = token_ids.len();
    if t + 1 > cfg.max_len {
        return Err(Error::SequenceTooLong {
            len: t,
            max_len: cfg.max_len,
        });
    }
    for &p in masked {
        if p >= t {
            return Err(Error::PositionOutOfRange { pos: p, len: t });
        }
    }
    let mut rows = Vec::with_capacity(t + 1);
    rows.push(CLS_ID);
    for (p, &id) in token_ids.iter().enumerate() {
        if id >= cfg.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "token id {id} exceeds vocab size {}",
                cfg.vocab_size
            )));
        }
        rows.push(if masked.contains(&p) { MASK_ID } else { id });
    }
    Ok(rows)
}

/// The forward pass, written once against [`MatOps`].
pub(crate) fn forward_rows<E: MatOps>(
    eng: &mut E,
    p: &ParamRefs<E::M>,
    cfg: &EncoderConfig,
    rows: &[usize],
) -> (E::M, E::M) {
    let n = rows.len();
    let tok = eng.gather_rows(&p.tok_emb, rows);
    let positions: Vec<usize> = (0..n).collect();
    let pos = eng.gather_rows(&p.pos_emb, &positions);
    let sum = eng.add(&tok, &pos);
    let mut x = eng.layer_norm(&sum, &p.ln_emb.gain, &p.ln_emb.offset);
    let head_dim = cfg.head_dim();
    for blk in &p.blocks {
        let q = eng.matmul(&x, &blk.wq);
        let q = eng.add_row(&q, &blk.bq);
        let k = eng.matmul(&x, &blk.wk);
        let k = eng.add_row(&k, &blk.bk);
        let v = eng.matmul(&x, &blk.wv);
        let v = eng.add_row(&v, &blk.bv);
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let (s, e) = (h * head_dim, (h + 1) * head_dim);
            let qh = eng.slice_cols(&q, s, e);
            let kh = eng.slice_cols(&k, s, e);
            let vh = eng.slice_cols(&v, s, e);
            let scores = eng.matmul_nt(&qh, &kh);
            let scores = eng.scale(&scores, 1.0 / (head_dim as f64).sqrt());
            let att = eng.softmax_rows(&scores);
            heads.push(eng.matmul(&att, &vh));
        }
        let ctx = eng.concat_cols(&heads);
        let proj = eng.matmul(&ctx, &blk.wo);
        let proj = eng.add_row(&proj, &blk.bo);
        let res = eng.add(&x, &proj);
        x = eng.layer_norm(&res, &blk.ln_attn.gain, &blk.ln_attn.offset);
        let f1 = eng.matmul(&x, &blk.w_ff1);
        let f1 = eng.add_row(&f1, &blk.b_ff1);
        let act = eng.gelu(&f1);
        let f2 = eng.matmul(&act, &blk.w_ff2);
        let f2 = eng.add_row(&f2, &blk.b_ff2);
        let res2 = eng.add(&x, &f2);
        x = eng.layer_norm(&res2, &blk.ln_ffn.gain, &blk.ln_ffn.offset);
    }
    let cls = eng.gather_rows(&x, &[0]);
    let token_rows: Vec<usize> = (1..n).collect();
    let hidden = eng.gather_rows(&x, &token_rows);
    (cls, hidden)
}

/// Direct forward pass reusing pre-shared parameter handles; this is the
/// hot path for the many probing passes over one parameter snapshot.
pub(crate) fn encode_with(
    refs: &ParamRefs<Arc<Array2<f64>>>,
    cfg: &EncoderConfig,
    token_ids: &[usize],
    masked: &BTreeSet<usize>,
) -> Result<TokenEmbeddings> {
    let rows = input_rows(cfg, token_ids, masked)?;
    let (cls, hidden) = forward_rows(&mut Plain, refs, cfg, &rows);
    Ok(TokenEmbeddings {
        cls: cls.row(0).to_owned(),
        hidden: Arc::try_unwrap(hidden).unwrap_or_else(|rc| (*rc).clone()),
    })
}

/// Encodes one sequence: pure function of (params, cfg, ids, mask set).
pub fn encode(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    token_ids: &[usize],
    masked: &BTreeSet<usize>,
) -> Result<TokenEmbeddings> {
    encode_with(&params.plain_refs(), cfg, token_ids, masked)
}

/// Records the forward pass on a tape; returns the (cls, hidden) node pair.
pub fn encode_on_tape(
    tape: &mut Tape,
    nodes: &ParamNodes,
    cfg: &EncoderConfig,
    token_ids: &[usize],
    masked: &BTreeSet<usize>,
) -> Result<(NodeId, NodeId)> {
    let rows = input_rows(cfg, token_ids, masked)?;
    Ok(forward_rows(tape, &nodes.refs, cfg, &rows))
}

// ---- checkpoint format ----

const CKPT_MAGIC: &[u8; 8] = b"SLFGCKPT";
const CKPT_VERSION: u32 = 1;

fn w_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn r_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn r_str(r: &mut impl Read) -> Result<String> {
    let len = r_u32(r).map_err(|e| Error::Checkpoint(e.to_string()))? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Writes config, vocabulary and all parameter arrays in a versioned binary
/// layout; round-trips bit-exactly.
pub fn save_checkpoint(
    path: &Path,
    cfg: &EncoderConfig,
    params: &EncoderParams,
    vocab: &Vocab,
) -> Result<()> {
    if !params.all_finite() {
        return Err(Error::NonFinite("refusing to save non-finite parameters".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.write_all(CKPT_MAGIC).map_err(io_err)?;
    w_u32(&mut w, CKPT_VERSION).map_err(io_err)?;
    w.write_all(&cfg.seed.to_le_bytes()).map_err(io_err)?;
    for v in [cfg.vocab_size, cfg.d_h, cfg.layers, cfg.heads, cfg.ffn_mult, cfg.max_len] {
        w_u32(&mut w, v as u32).map_err(io_err)?;
    }
    let tokens = vocab.id_ordered();
    w_u32(&mut w, tokens.len() as u32).map_err(io_err)?;
    for t in tokens {
        w_str(&mut w, t).map_err(io_err)?;
    }
    let arrays = params.arrays();
    w_u32(&mut w, arrays.len() as u32).map_err(io_err)?;
    for (name, arr) in arrays {
        w_str(&mut w, &name).map_err(io_err)?;
        w_u32(&mut w, arr.nrows() as u32).map_err(io_err)?;
        w_u32(&mut w, arr.ncols() as u32).map_err(io_err)?;
        for v in arr.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(EncoderConfig, EncoderParams, Vocab)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let ck = |e: std::io::Error| Error::Checkpoint(format!("truncated checkpoint: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(ck)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r_u32(&mut r).map_err(ck)?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {CKPT_VERSION}"
        )));
    }
    let seed = r_u64(&mut r).map_err(ck)?;
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r_u32(&mut r).map_err(ck)? as usize;
    }
    let cfg = EncoderConfig {
        vocab_size: dims[0],
        d_h: dims[1],
        layers: dims[2],
        heads: dims[3],
        ffn_mult: dims[4],
        max_len: dims[5],
        seed,
    };
    cfg.validate()?;
    let n_tokens = r_u32(&mut r).map_err(ck)? as usize;
    let mut tokens = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        tokens.push(r_str(&mut r)?);
    }
    let vocab = Vocab::from_id_ordered(tokens)?;
    if vocab.len() != cfg.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocab has {} entries but config declares {}",
            vocab.len(),
            cfg.vocab_size
        )));
    }

    // Read arrays into a template, enforcing names, order and shapes.
    let mut params = init_params(&cfg)?;
    let n_arrays = r_u32(&mut r).map_err(ck)? as usize;
    let expected = params.arrays().len();
    if n_arrays != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {n_arrays} arrays, config implies {expected}"
        )));
    }
    for (name, arr) in params.arrays_mut() {
        let stored = r_str(&mut r)?;
        if stored != name {
            return Err(Error::Checkpoint(format!(
                "array order mismatch: found `{stored}`, expected `{name}`"
            )));
        }
        let rows = r_u32(&mut r).map_err(ck)? as usize;
        let cols = r_u32(&mut r).map_err(ck)? as usize;
        if (rows, cols) != arr.dim() {
            return Err(Error::Checkpoint(format!(
                "array `{name}` has shape {rows}x{cols}, expected {:?}",
                arr.dim()
            )));
        }
        for v in arr.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(ck)?;
            *v = f64::from_le_bytes(b);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "non-finite value in checkpoint array `{name}`"
                )));
            }
        }
    }
    Ok((cfg, params, vocab))
}
