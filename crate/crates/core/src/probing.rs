//! Perturbed-masking impact matrices and recursive cut-score segmentation.
//!
//! For every token pair (i, j), the impact score is the distance between the
//! encoder's vector at position i when only i is masked and when both i and
//! j are masked. The resulting matrix drives a greedy recursive splitter:
//! each span is cut where within-block affinity minus cross-block affinity
//! peaks, and the tree frontier at a chosen depth yields the segmentation.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Utterance, Vocab};
use crate::encoder::{encode_with, EncoderConfig, EncoderParams, TokenEmbeddings};
use crate::error::{Error, Result};
use crate::tape::cosine_k;

/// Distance between two hidden vectors when building impact scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    OneMinusCosine,
}

impl FromStr for DistanceMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(DistanceMetric::Euclidean),
            "one-minus-cosine" => Ok(DistanceMetric::OneMinusCosine),
            other => Err(Error::InvalidConfig(format!(
                "unknown distance metric `{other}` (euclidean | one-minus-cosine)"
            ))),
        }
    }
}

/// How cut-score sub-blocks are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockAgg {
    #[default]
    Mean,
    Sum,
}

impl FromStr for BlockAgg {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(BlockAgg::Mean),
            "sum" => Ok(BlockAgg::Sum),
            other => Err(Error::InvalidConfig(format!(
                "unknown block aggregation `{other}` (mean | sum)"
            ))),
        }
    }
}

fn distance(metric: DistanceMetric, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    match metric {
        DistanceMetric::Euclidean => {
            let d = &a - &b;
            d.dot(&d).sqrt()
        }
        // Rounding can push the cosine a hair past 1; clamp so impact
        // scores stay non-negative.
        DistanceMetric::OneMinusCosine => (1.0 - cosine_k(a, b)).max(0.0),
    }
}

/// T x T pairwise perturbation-impact scores for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactMatrix {
    f: Array2<f64>,
    utterance_id: String,
}

impl ImpactMatrix {
    /// Validates entries (finite, non-negative) and forces the diagonal to 0.
    pub fn new(utterance_id: String, mut f: Array2<f64>) -> Result<Self> {
        if f.nrows() != f.ncols() {
            return Err(Error::ImpactFormat(format!(
                "matrix for `{utterance_id}` is {}x{}, expected square",
                f.nrows(),
                f.ncols()
            )));
        }
        for v in f.iter() {
            if !v.is_finite() {
                return Err(Error::ImpactFormat(format!(
                    "non-finite entry in matrix for `{utterance_id}`"
                )));
            }
            if *v < 0.0 {
                return Err(Error::ImpactFormat(format!(
                    "negative impact {v} in matrix for `{utterance_id}`"
                )));
            }
        }
        for i in 0..f.nrows() {
            f[(i, i)] = 0.0;
        }
        Ok(ImpactMatrix { f, utterance_id })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.f
    }

    pub fn utterance_id(&self) -> &str {
        &self.utterance_id
    }

    pub fn t(&self) -> usize {
        self.f.nrows()
    }
}

/// Builds the impact matrix with T single-mask baselines and one doubly
/// masked pass per ordered pair; rows are computed in parallel.
pub fn impact_matrix(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    vocab: &Vocab,
    u: &Utterance,
    metric: DistanceMetric,
) -> Result<ImpactMatrix> {
    let ids = vocab.encode(&u.tokens);
    let t = ids.len();
    let refs = params.plain_refs();
    let rows: Vec<Vec<f64>> = (0..t)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let base = encode_with(&refs, cfg, &ids, &BTreeSet::from([i]))?;
            let base_i = base.hidden.row(i);
            let mut row = vec![0.0; t];
            for (j, slot) in row.iter_mut().enumerate() {
                if j == i {
                    continue;
                }
                let pair = encode_with(&refs, cfg, &ids, &BTreeSet::from([i, j]))?;
                *slot = distance(metric, base_i, pair.hidden.row(i));
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let mut f = Array2::zeros((t, t));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            f[(i, j)] = v;
        }
    }
    ImpactMatrix::new(u.id.clone(), f)
}

/// O(1) block queries over a matrix via 2-D prefix sums.
pub struct CutScorer {
    prefix: Array2<f64>,
    agg: BlockAgg,
    t: usize,
}

impl CutScorer {
    pub fn new(f: &Array2<f64>, agg: BlockAgg) -> Self {
        let t = f.nrows();
        let mut prefix = Array2::zeros((t + 1, t + 1));
        for r in 0..t {
            for c in 0..t {
                prefix[(r + 1, c + 1)] =
                    f[(r, c)] + prefix[(r, c + 1)] + prefix[(r + 1, c)] - prefix[(r, c)];
            }
        }
        CutScorer { prefix, agg, t }
    }

    /// Aggregate over rows r0..=r1, columns c0..=c1.
    fn block(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> f64 {
        let s = self.prefix[(r1 + 1, c1 + 1)] - self.prefix[(r0, c1 + 1)]
            - self.prefix[(r1 + 1, c0)]
            + self.prefix[(r0, c0)];
        match self.agg {
            BlockAgg::Sum => s,
            BlockAgg::Mean => s / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64,
        }
    }

    /// Within-block affinity of [i,k] and [k+1,j] minus their cross blocks.
    pub fn score(&self, i: usize, j: usize, k: usize) -> Result<f64> {
        if !(i <= k && k < j && j < self.t) {
            return Err(Error::InvalidCut { i, j, k });
        }
        Ok(self.block(i, k, i, k) + self.block(k + 1, j, k + 1, j)
            - self.block(i, k, k + 1, j)
            - self.block(k + 1, j, i, k))
    }

    /// Highest-scoring cut in span (i, j); ties go to the smallest k.
    pub fn best_cut(&self, i: usize, j: usize) -> Result<(usize, f64)> {
        let mut best = (i, self.score(i, j, i)?);
        for k in i + 1..j {
            let s = self.score(i, j, k)?;
            if s > best.1 {
                best = (k, s);
            }
        }
        Ok(best)
    }
}

/// The split score for cutting span (i, j) between positions k and k+1.
pub fn cut_score(f: &Array2<f64>, i: usize, j: usize, k: usize, agg: BlockAgg) -> Result<f64> {
    CutScorer::new(f, agg).score(i, j, k)
}

/// One node of the recursive segmentation tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegNode {
    pub span: (usize, usize),
    pub depth: usize,
    /// Cut position k: the span splits into [start, k] and [k+1, end].
    pub cut: Option<usize>,
    /// Indices of the two children in `SegTree::nodes`.
    pub children: Option<(usize, usize)>,
}

/// Binary segmentation tree; the root (depth 0) spans the whole utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegTree {
    pub nodes: Vec<SegNode>,
    pub max_depth: usize,
    pub t: usize,
}

/// Greedily splits every multi-token frontier span at its best cut until
/// `max_depth` rounds have run; single-token spans persist unchanged.
pub fn build_tree(f: &Array2<f64>, max_depth: usize, agg: BlockAgg) -> Result<SegTree> {
    let t = f.nrows();
    let scorer = CutScorer::new(f, agg);
    let mut nodes = vec![SegNode {
        span: (0, t.saturating_sub(1)),
        depth: 0,
        cut: None,
        children: None,
    }];
    let mut frontier = vec![0usize];
    for _ in 0..max_depth {
        let mut next = Vec::new();
        for idx in frontier {
            let (start, end) = nodes[idx].span;
            if start == end {
                continue;
            }
            let depth = nodes[idx].depth;
            let (k, _) = scorer.best_cut(start, end)?;
            let left = SegNode {
                span: (start, k),
                depth: depth + 1,
                cut: None,
                children: None,
            };
            let right = SegNode {
                span: (k + 1, end),
                depth: depth + 1,
                cut: None,
                children: None,
            };
            let li = nodes.len();
            nodes.push(left);
            let ri = nodes.len();
            nodes.push(right);
            nodes[idx].cut = Some(k);
            nodes[idx].children = Some((li, ri));
            next.push(li);
            next.push(ri);
        }
        frontier = next;
    }
    Ok(SegTree {
        nodes,
        max_depth,
        t,
    })
}

/// Where a segmentation came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Upl { depth: usize },
    Random { seed: u64 },
    LeftBranching { depth: usize },
    RightBranching { depth: usize },
    External,
}

/// An ordered, contiguous, exhaustive partition of token indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    /// Inclusive (start, end) index pairs, sorted, covering [0, T-1].
    pub spans: Vec<(usize, usize)>,
    pub provenance: Provenance,
}

impl Segmentation {
    pub fn m(&self) -> usize {
        self.spans.len()
    }

    /// Checks the partition property against an utterance length.
    pub fn validate(&self, t: usize) -> Result<()> {
        if t == 0 || self.spans.is_empty() {
            return Err(Error::InvalidSegmentation(
                "empty segmentation or zero-length utterance".into(),
            ));
        }
        let mut expect = 0usize;
        for &(s, e) in &self.spans {
            if s != expect || e < s {
                return Err(Error::InvalidSegmentation(format!(
                    "span ({s},{e}) breaks contiguous coverage at {expect}"
                )));
            }
            expect = e + 1;
        }
        if expect != t {
            return Err(Error::InvalidSegmentation(format!(
                "spans cover [0,{}) but T = {t}",
                expect
            )));
        }
        Ok(())
    }

    /// Cut positions: the start index of every span except the first.
    pub fn cut_set(&self) -> BTreeSet<usize> {
        self.spans.iter().skip(1).map(|&(s, _)| s).collect()
    }

    pub fn from_cuts(t: usize, cuts: &BTreeSet<usize>, provenance: Provenance) -> Self {
        let mut spans = Vec::with_capacity(cuts.len() + 1);
        let mut start = 0usize;
        for &c in cuts {
            spans.push((start, c - 1));
            start = c;
        }
        spans.push((start, t - 1));
        Segmentation { spans, provenance }
    }
}

/// Tree frontier at depth `d`: nodes at depth d plus shallower leaves,
/// left to right.
pub fn segments_at_depth(tree: &SegTree, d: usize) -> Result<Segmentation> {
    if d > tree.max_depth {
        return Err(Error::InvalidSegmentation(format!(
            "depth {d} exceeds built depth {}",
            tree.max_depth
        )));
    }
    let mut spans = Vec::new();
    let mut stack = vec![0usize];
    while let Some(idx) = stack.pop() {
        let node = &tree.nodes[idx];
        match node.children {
            Some((li, ri)) if node.depth < d => {
                // Right first so the left child is processed first (LIFO).
                stack.push(ri);
                stack.push(li);
            }
            _ => spans.push(node.span),
        }
    }
    Ok(Segmentation {
        spans,
        provenance: Provenance::Upl { depth: d },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchSide {
    Left,
    Right,
}

impl FromStr for BranchSide {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" | "lb" => Ok(BranchSide::Left),
            "right" | "rb" => Ok(BranchSide::Right),
            other => Err(Error::InvalidConfig(format!(
                "unknown branching side `{other}` (left | right)"
            ))),
        }
    }
}

/// Parameter-free baseline: each round peels one token off the remaining
/// multi-token span — the first token for right branching, the last for
/// left branching.
pub fn branching_baseline(t: usize, d: usize, side: BranchSide) -> Segmentation {
    assert!(t >= 1, "branching_baseline needs T >= 1");
    let peel = d.min(t.saturating_sub(1));
    let mut spans = Vec::new();
    match side {
        BranchSide::Right => {
            for i in 0..peel {
                spans.push((i, i));
            }
            spans.push((peel, t - 1));
        }
        BranchSide::Left => {
            spans.push((0, t - 1 - peel));
            for i in (t - peel)..t {
                spans.push((i, i));
            }
        }
    }
    let provenance = match side {
        BranchSide::Left => Provenance::LeftBranching { depth: d },
        BranchSide::Right => Provenance::RightBranching { depth: d },
    };
    Segmentation { spans, provenance }
}

/// m x d_h matrix of pooled span representations.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMatrix {
    pub rows: Array2<f64>,
}

/// Row i = arithmetic mean of the final-layer token vectors in span i.
pub fn pool_segments(emb: &TokenEmbeddings, seg: &Segmentation) -> Result<SegmentMatrix> {
    let t = emb.hidden.nrows();
    for &(s, e) in &seg.spans {
        if s > e || e >= t {
            return Err(Error::SpanOutOfRange {
                start: s,
                end: e,
                len: t,
            });
        }
    }
    Ok(SegmentMatrix {
        rows: crate::tape::mean_rows_spans_k(&emb.hidden, &seg.spans),
    })
}

// ---- impact matrix file format ----

/// Writes `# id=<utterance_id> T=<n>` then n rows of n comma-separated
/// decimals (shortest round-trip formatting).
pub fn export_impact(path: &Path, m: &ImpactMatrix) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(w, "# id={} T={}", m.utterance_id(), m.t()).map_err(io_err)?;
    for row in m.matrix().rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(",")).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a matrix written by [`export_impact`]; rejects non-square shapes,
/// non-finite values and negative entries, and forces the diagonal to 0.
pub fn import_impact(path: &Path) -> Result<ImpactMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::ImpactFormat("empty impact file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let rest = header
        .strip_prefix("# id=")
        .ok_or_else(|| Error::ImpactFormat(format!("bad header `{header}`")))?;
    let (id, t_part) = rest
        .rsplit_once(" T=")
        .ok_or_else(|| Error::ImpactFormat(format!("bad header `{header}`")))?;
    let t: usize = t_part
        .trim()
        .parse()
        .map_err(|_| Error::ImpactFormat(format!("bad T in header `{header}`")))?;
    let mut values = Vec::with_capacity(t * t);
    let mut n_rows = 0usize;
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        n_rows += 1;
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::ImpactFormat(format!("bad number `{tok}`")))
            })
            .collect::<Result<_>>()?;
        if row.len() != t {
            return Err(Error::ImpactFormat(format!(
                "row {n_rows} has {} entries, expected {t}",
                row.len()
            )));
        }
        values.extend(row);
    }
    if n_rows != t {
        return Err(Error::ImpactFormat(format!(
            "found {n_rows} rows, expected {t}"
        )));
    }
    let f = Array2::from_shape_vec((t, t), values).expect("shape checked above");
    ImpactMatrix::new(id.to_string(), f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::RngExt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block_matrix() -> Array2<f64> {
        array![
            [1.0, 1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 1.0],
            [0.0, 0.0, 1.0, 1.0]
        ]
    }

    /// Independent slow implementation used as the scoring oracle.
    fn naive_score(f: &Array2<f64>, i: usize, j: usize, k: usize, agg: BlockAgg) -> f64 {
        let blk = |r0: usize, r1: usize, c0: usize, c1: usize| -> f64 {
            let mut s = 0.0;
            for r in r0..=r1 {
                for c in c0..=c1 {
                    s += f[(r, c)];
                }
            }
            match agg {
                BlockAgg::Sum => s,
                BlockAgg::Mean => s / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64,
            }
        };
        blk(i, k, i, k) + blk(k + 1, j, k + 1, j) - blk(i, k, k + 1, j) - blk(k + 1, j, i, k)
    }

    fn randmat(t: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Array2::from_shape_fn((t, t), |_| rng.random_range(0.0..1.0));
        for i in 0..t {
            f[(i, i)] = 0.0;
        }
        f
    }

    #[test]
    fn cut_score_block_example() {
        let f = block_matrix();
        assert_eq!(cut_score(&f, 0, 3, 1, BlockAgg::Mean).unwrap(), 2.0);
        let s0 = cut_score(&f, 0, 3, 0, BlockAgg::Mean).unwrap();
        let s2 = cut_score(&f, 0, 3, 2, BlockAgg::Mean).unwrap();
        assert!((s0 - 8.0 / 9.0).abs() < 1e-12);
        assert!((s2 - 8.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn cut_score_constant_matrix_is_zero() {
        let f = Array2::from_elem((5, 5), 0.7);
        for k in 0..4 {
            assert!(cut_score(&f, 0, 4, k, BlockAgg::Mean).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn cut_score_rejects_bad_indices() {
        let f = block_matrix();
        assert!(matches!(
            cut_score(&f, 0, 3, 3, BlockAgg::Mean),
            Err(Error::InvalidCut { .. })
        ));
        assert!(matches!(
            cut_score(&f, 2, 1, 1, BlockAgg::Mean),
            Err(Error::InvalidCut { .. })
        ));
        // Length-2 span: k = i is the single legal candidate.
        assert!(cut_score(&f, 2, 3, 2, BlockAgg::Mean).is_ok());
    }

    #[test]
    fn scorer_matches_naive_on_random_matrices() {
        for seed in 0..20 {
            let t = 2 + (seed as usize % 7);
            let f = randmat(t, seed);
            for agg in [BlockAgg::Mean, BlockAgg::Sum] {
                let scorer = CutScorer::new(&f, agg);
                for i in 0..t {
                    for j in i + 1..t {
                        for k in i..j {
                            let a = scorer.score(i, j, k).unwrap();
                            let b = naive_score(&f, i, j, k, agg);
                            assert!((a - b).abs() < 1e-9, "({i},{j},{k}): {a} vs {b}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn build_tree_block_example_and_depths() {
        let f = block_matrix();
        let tree = build_tree(&f, 1, BlockAgg::Mean).unwrap();
        let seg = segments_at_depth(&tree, 1).unwrap();
        assert_eq!(seg.spans, vec![(0, 1), (2, 3)]);

        let root_only = segments_at_depth(&tree, 0).unwrap();
        assert_eq!(root_only.spans, vec![(0, 3)]);

        let deep = build_tree(&f, 5, BlockAgg::Mean).unwrap();
        let leaves = segments_at_depth(&deep, 5).unwrap();
        assert_eq!(leaves.spans, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert!(segments_at_depth(&deep, 6).is_err());
    }

    #[test]
    fn build_tree_matches_exhaustive_argmax_oracle() {
        for seed in 0..100 {
            let t = 2 + (seed as usize % 7);
            let f = randmat(t, 1000 + seed);
            for agg in [BlockAgg::Mean, BlockAgg::Sum] {
                let tree = build_tree(&f, 7, agg).unwrap();
                for node in &tree.nodes {
                    if let Some(k) = node.cut {
                        let (s, e) = node.span;
                        let mut best_k = s;
                        let mut best = naive_score(&f, s, e, s, agg);
                        for cand in s + 1..e {
                            let sc = naive_score(&f, s, e, cand, agg);
                            if sc > best {
                                best = sc;
                                best_k = cand;
                            }
                        }
                        assert_eq!(k, best_k, "span {:?} agg {agg:?} seed {seed}", node.span);
                    }
                }
            }
        }
    }

    #[test]
    fn branching_baselines_match_closed_forms() {
        let rb = branching_baseline(4, 2, BranchSide::Right);
        assert_eq!(rb.spans, vec![(0, 0), (1, 1), (2, 3)]);
        let lb = branching_baseline(4, 2, BranchSide::Left);
        assert_eq!(lb.spans, vec![(0, 1), (2, 2), (3, 3)]);
        assert_eq!(branching_baseline(4, 0, BranchSide::Left).spans, vec![(0, 3)]);
        assert_eq!(
            branching_baseline(3, 9, BranchSide::Right).spans,
            vec![(0, 0), (1, 1), (2, 2)]
        );
        assert_eq!(branching_baseline(1, 3, BranchSide::Left).spans, vec![(0, 0)]);
    }

    #[test]
    fn pool_segments_examples() {
        let emb = TokenEmbeddings {
            cls: ndarray::Array1::zeros(2),
            hidden: array![[1.0, 0.0], [0.0, 1.0]],
        };
        let seg = Segmentation {
            spans: vec![(0, 1)],
            provenance: Provenance::External,
        };
        let pooled = pool_segments(&emb, &seg).unwrap();
        assert_eq!(pooled.rows, array![[0.5, 0.5]]);

        let singles = Segmentation {
            spans: vec![(0, 0), (1, 1)],
            provenance: Provenance::External,
        };
        assert_eq!(pool_segments(&emb, &singles).unwrap().rows, emb.hidden);

        let bad = Segmentation {
            spans: vec![(0, 2)],
            provenance: Provenance::External,
        };
        assert!(matches!(
            pool_segments(&emb, &bad),
            Err(Error::SpanOutOfRange { .. })
        ));
    }

    #[test]
    fn impact_matrix_is_pure_with_zero_diagonal() {
        let u = Utterance {
            id: "u1".into(),
            tokens: vec!["book".into(), "a".into(), "table".into()],
            slots: vec!["O".into(), "O".into(), "O".into()],
            intent: "book".into(),
        };
        let vocab = Vocab::from_utterances([&u]);
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            d_h: 8,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            max_len: 8,
            seed: 3,
        };
        let params = init_params(&cfg).unwrap();
        for metric in [DistanceMetric::Euclidean, DistanceMetric::OneMinusCosine] {
            let a = impact_matrix(&params, &cfg, &vocab, &u, metric).unwrap();
            let b = impact_matrix(&params, &cfg, &vocab, &u, metric).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.t(), 3);
            for i in 0..3 {
                assert_eq!(a.matrix()[(i, i)], 0.0);
            }
            assert!(a.matrix().iter().all(|v| *v >= 0.0 && v.is_finite()));
        }

        let single = Utterance {
            id: "u2".into(),
            tokens: vec!["hi".into()],
            slots: vec!["O".into()],
            intent: "greet".into(),
        };
        let m =
            impact_matrix(&params, &cfg, &vocab, &single, DistanceMetric::Euclidean).unwrap();
        assert_eq!(m.matrix(), &Array2::<f64>::zeros((1, 1)));
    }

    #[test]
    fn impact_matrix_sees_context_difference() {
        // Masking a second position must generally change the hidden state
        // at the probed position: off-diagonal entries should be nonzero.
        let u = Utterance {
            id: "u1".into(),
            tokens: vec!["new".into(), "york".into(), "city".into()],
            slots: vec!["O".into(), "O".into(), "O".into()],
            intent: "x".into(),
        };
        let vocab = Vocab::from_utterances([&u]);
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            d_h: 8,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            max_len: 8,
            seed: 5,
        };
        let params = init_params(&cfg).unwrap();
        let m = impact_matrix(&params, &cfg, &vocab, &u, DistanceMetric::Euclidean).unwrap();
        let off: f64 = m
            .matrix()
            .indexed_iter()
            .filter(|((i, j), _)| i != j)
            .map(|(_, v)| *v)
            .sum();
        assert!(off > 0.0);
    }

    #[test]
    fn impact_export_import_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = ImpactMatrix::new("u7".into(), randmat(4, 9)).unwrap();
        export_impact(&path, &m).unwrap();
        let back = import_impact(&path).unwrap();
        assert_eq!(m, back);

        std::fs::write(&path, "# id=x T=3\n1,2,3\n4,5,6\n").unwrap();
        assert!(matches!(import_impact(&path), Err(Error::ImpactFormat(_))));
        std::fs::write(&path, "# id=x T=2\n0,1,2\n3,0,4\n").unwrap();
        assert!(matches!(import_impact(&path), Err(Error::ImpactFormat(_))));
        std::fs::write(&path, "# id=x T=2\n0,-0.1\n0.2,0\n").unwrap();
        let err = import_impact(&path).unwrap_err();
        assert!(err.to_string().contains("negative impact"), "{err}");
        std::fs::write(&path, "# id=x T=2\n0,NaN\n0.2,0\n").unwrap();
        assert!(import_impact(&path).is_err());
        // Nonzero diagonal is tolerated and forced to zero.
        std::fs::write(&path, "# id=x T=2\n5,1\n2,5\n").unwrap();
        let fixed = import_impact(&path).unwrap();
        assert_eq!(fixed.matrix()[(0, 0)], 0.0);
        assert_eq!(fixed.matrix()[(1, 1)], 0.0);
    }

    #[test]
    fn pooling_commutes_with_singleton_refinement() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let hidden = Array2::from_shape_fn((6, 5), |_| rng.random_range(-1.0..1.0));
        let emb = TokenEmbeddings {
            cls: ndarray::Array1::zeros(5),
            hidden,
        };
        let seg = Segmentation {
            spans: vec![(0, 2), (3, 3), (4, 5)],
            provenance: Provenance::External,
        };
        let direct = pool_segments(&emb, &seg).unwrap().rows;
        let singles = Segmentation {
            spans: (0..6).map(|i| (i, i)).collect(),
            provenance: Provenance::External,
        };
        let fine = pool_segments(&emb, &singles).unwrap().rows;
        for (r, &(s, e)) in seg.spans.iter().enumerate() {
            let w = 1.0 / (e - s + 1) as f64;
            for c in 0..5 {
                let avg: f64 = (s..=e).map(|i| fine[(i, c)]).sum::<f64>() * w;
                assert!((avg - direct[(r, c)]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn frontier_spans_partition_and_grow(seed in 0u64..500, depth in 0usize..6) {
            let t = 1 + (seed as usize % 8);
            let f = randmat(t, seed);
            let tree = build_tree(&f, depth, BlockAgg::Mean).unwrap();
            let mut prev_m = 0;
            for d in 0..=depth {
                let seg = segments_at_depth(&tree, d).unwrap();
                seg.validate(t).unwrap();
                prop_assert!(seg.m() >= prev_m);
                prop_assert!(seg.m() <= t.min(1 << d));
                prev_m = seg.m();
            }
        }

        #[test]
        fn argmax_decisions_are_scale_invariant(seed in 0u64..200, pow in -3i32..4) {
            let t = 2 + (seed as usize % 7);
            let f = randmat(t, seed);
            // Powers of two make the scaling exact in floating point.
            let lambda = (2.0f64).powi(pow);
            for agg in [BlockAgg::Mean, BlockAgg::Sum] {
                let a = build_tree(&f, 7, agg).unwrap();
                let b = build_tree(&(&f * lambda), 7, agg).unwrap();
                let cuts_a: Vec<_> = a.nodes.iter().map(|n| n.cut).collect();
                let cuts_b: Vec<_> = b.nodes.iter().map(|n| n.cut).collect();
                prop_assert_eq!(cuts_a, cuts_b);
            }
        }
    }
}
