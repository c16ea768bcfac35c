//! Reverse-mode automatic differentiation over `ndarray` matrices.
//!
//! A [`Tape`] records a DAG of matrix operations; [`Tape::backward`] walks it
//! in reverse to accumulate gradients for every leaf. The op set is exactly
//! what the encoder and the contrastive losses need. The forward math lives
//! in free kernel functions so the untaped encoder path can call the same
//! code and produce bit-identical values.

use ndarray::{Array2, ArrayView1, Axis};

/// Epsilon added to the variance inside layer normalization.
pub const LN_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    /// Matrix plus a 1-row matrix broadcast over rows.
    AddRow(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    /// `a · b`
    Matmul(usize, usize),
    /// `a · bᵀ`
    MatmulNT(usize, usize),
    SoftmaxRows(usize),
    LayerNorm { x: usize, gain: usize, offset: usize },
    Gelu(usize),
    GatherRows { x: usize, rows: Vec<usize> },
    SliceCols { x: usize, start: usize, end: usize },
    ConcatCols(Vec<usize>),
    /// Row r of the output is the mean of the input rows in span r.
    MeanRowsSpans { x: usize, spans: Vec<(usize, usize)> },
    /// Cosine similarity of two single-row matrices; 0 for a zero vector.
    Cosine(usize, usize),
    /// Mean cosine similarity over all row pairs of two matrices.
    PairwiseMeanCos(usize, usize),
    /// Two-candidate InfoNCE on scalar similarities.
    InfoNce { pos: usize, neg: usize, tau: f64 },
    WeightedSum(Vec<(usize, f64)>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradient store returned by [`Tape::backward`], indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Array2<f64>> {
        self.grads[id.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar() on a non-1x1 node");
        v[(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = &self.nodes[row.0].value;
        assert_eq!(r.nrows(), 1, "add_row expects a 1-row matrix");
        let v = &self.nodes[a.0].value + &r.row(0);
        self.push(v, Op::AddRow(a.0, row.0))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a.0))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::Matmul(a.0, b.0))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(v, Op::MatmulNT(a.0, b.0))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows_k(&self.nodes[a.0].value);
        self.push(v, Op::SoftmaxRows(a.0))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, offset: NodeId) -> NodeId {
        let v = layer_norm_k(
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[offset.0].value,
        );
        self.push(
            v,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                offset: offset.0,
            },
        )
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = gelu_k(&self.nodes[a.0].value);
        self.push(v, Op::Gelu(a.0))
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let src = &self.nodes[x.0].value;
        let mut v = Array2::zeros((rows.len(), src.ncols()));
        for (r, &i) in rows.iter().enumerate() {
            v.row_mut(r).assign(&src.row(i));
        }
        self.push(
            v,
            Op::GatherRows {
                x: x.0,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.nodes[x.0]
            .value
            .slice(ndarray::s![.., start..end])
            .to_owned();
        self.push(
            v,
            Op::SliceCols {
                x: x.0,
                start,
                end,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    /// Spans are inclusive `(start, end)` row ranges of the input.
    pub fn mean_rows_spans(&mut self, x: NodeId, spans: &[(usize, usize)]) -> NodeId {
        let v = mean_rows_spans_k(&self.nodes[x.0].value, spans);
        self.push(
            v,
            Op::MeanRowsSpans {
                x: x.0,
                spans: spans.to_vec(),
            },
        )
    }

    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.nrows(), 1, "cosine expects 1-row matrices");
        assert_eq!(bv.nrows(), 1, "cosine expects 1-row matrices");
        let c = cosine_k(av.row(0), bv.row(0));
        self.push(Array2::from_elem((1, 1), c), Op::Cosine(a.0, b.0))
    }

    pub fn pairwise_mean_cos(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let c = pairwise_mean_cos_k(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push(Array2::from_elem((1, 1), c), Op::PairwiseMeanCos(a.0, b.0))
    }

    pub fn infonce(&mut self, pos: NodeId, neg: NodeId, tau: f64) -> NodeId {
        let s_pos = self.scalar(pos);
        let s_neg = self.scalar(neg);
        let v = infonce_k(s_pos, s_neg, tau);
        self.push(
            Array2::from_elem((1, 1), v),
            Op::InfoNce {
                pos: pos.0,
                neg: neg.0,
                tau,
            },
        )
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let mut s = 0.0;
        for (id, w) in terms {
            s += w * self.scalar(*id);
        }
        self.push(
            Array2::from_elem((1, 1), s),
            Op::WeightedSum(terms.iter().map(|(id, w)| (id.0, *w)).collect()),
        )
    }

    /// Backpropagates from a scalar root; leaf gradients stay in the result,
    /// intermediate gradients are dropped as soon as they are consumed.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.dim(),
            (1, 1),
            "backward() needs a scalar root"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            if grads[i].is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = grads[i].take().expect("checked above");
            self.backprop_node(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Array2<f64>, grads: &mut Vec<Option<Array2<f64>>>) {
        let val = |j: usize| &self.nodes[j].value;
        match &self.nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                let rsum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                acc(grads, *row, rsum);
            }
            Op::Scale(a, c) => acc(grads, *a, g * *c),
            Op::Sum(a) => acc(grads, *a, Array2::from_elem(val(*a).dim(), g[(0, 0)])),
            Op::Matmul(a, b) => {
                acc(grads, *a, g.dot(&val(*b).t()));
                acc(grads, *b, val(*a).t().dot(g));
            }
            Op::MatmulNT(a, b) => {
                acc(grads, *a, g.dot(val(*b)));
                acc(grads, *b, g.t().dot(val(*a)));
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut dx = g * y;
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    drow.scaled_add(-dot, &yrow);
                }
                acc(grads, *a, dx);
            }
            Op::LayerNorm { x, gain, offset } => {
                let (dx, dgain, doffset) = layer_norm_backward(val(*x), val(*gain), g);
                acc(grads, *x, dx);
                acc(grads, *gain, dgain);
                acc(grads, *offset, doffset);
            }
            Op::Gelu(a) => {
                let x = val(*a);
                let dx = x.mapv(gelu_deriv) * g;
                acc(grads, *a, dx);
            }
            Op::GatherRows { x, rows } => {
                let mut dx = Array2::zeros(val(*x).dim());
                for (r, &src) in rows.iter().enumerate() {
                    let mut target = dx.row_mut(src);
                    target += &g.row(r);
                }
                acc(grads, *x, dx);
            }
            Op::SliceCols { x, start, end } => {
                let mut dx = Array2::zeros(val(*x).dim());
                dx.slice_mut(ndarray::s![.., *start..*end]).assign(g);
                acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    let dp = g.slice(ndarray::s![.., col..col + w]).to_owned();
                    acc(grads, p, dp);
                    col += w;
                }
            }
            Op::MeanRowsSpans { x, spans } => {
                let mut dx = Array2::zeros(val(*x).dim());
                for (r, &(s, e)) in spans.iter().enumerate() {
                    let inv = 1.0 / (e - s + 1) as f64;
                    for row in s..=e {
                        let mut target = dx.row_mut(row);
                        target.scaled_add(inv, &g.row(r));
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Cosine(a, b) => {
                let gs = g[(0, 0)];
                let (da, db) = cosine_backward(val(*a).row(0), val(*b).row(0), gs);
                acc(grads, *a, da.insert_axis(Axis(0)));
                acc(grads, *b, db.insert_axis(Axis(0)));
            }
            Op::PairwiseMeanCos(a, b) => {
                let gs = g[(0, 0)];
                let av = val(*a);
                let bv = val(*b);
                let scale = gs / (av.nrows() * bv.nrows()) as f64;
                let mut da = Array2::zeros(av.dim());
                let mut db = Array2::zeros(bv.dim());
                for i in 0..av.nrows() {
                    for j in 0..bv.nrows() {
                        let (di, dj) = cosine_backward(av.row(i), bv.row(j), scale);
                        let mut ra = da.row_mut(i);
                        ra += &di;
                        let mut rb = db.row_mut(j);
                        rb += &dj;
                    }
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::InfoNce { pos, neg, tau } => {
                let z = (self.nodes[*neg].value[(0, 0)] - self.nodes[*pos].value[(0, 0)]) / tau;
                let sig = stable_sigmoid(z);
                let gs = g[(0, 0)];
                acc(grads, *pos, Array2::from_elem((1, 1), -gs * sig / tau));
                acc(grads, *neg, Array2::from_elem((1, 1), gs * sig / tau));
            }
            Op::WeightedSum(terms) => {
                let gs = g[(0, 0)];
                for (id, w) in terms {
                    acc(grads, *id, Array2::from_elem((1, 1), gs * w));
                }
            }
        }
    }
}

/// The matrix operations the encoder forward pass is written against.
///
/// Implemented by [`Tape`] (recording, for gradients) and by [`Plain`]
/// (direct evaluation). Both routes share the same kernels, so their values
/// are bit-identical.
pub(crate) trait MatOps {
    type M: Clone;
    fn add(&mut self, a: &Self::M, b: &Self::M) -> Self::M;
    fn add_row(&mut self, a: &Self::M, row: &Self::M) -> Self::M;
    fn matmul(&mut self, a: &Self::M, b: &Self::M) -> Self::M;
    fn matmul_nt(&mut self, a: &Self::M, b: &Self::M) -> Self::M;
    fn scale(&mut self, a: &Self::M, c: f64) -> Self::M;
    fn softmax_rows(&mut self, a: &Self::M) -> Self::M;
    fn layer_norm(&mut self, x: &Self::M, gain: &Self::M, offset: &Self::M) -> Self::M;
    fn gelu(&mut self, a: &Self::M) -> Self::M;
    fn gather_rows(&mut self, x: &Self::M, rows: &[usize]) -> Self::M;
    fn slice_cols(&mut self, x: &Self::M, start: usize, end: usize) -> Self::M;
    fn concat_cols(&mut self, parts: &[Self::M]) -> Self::M;
}

impl MatOps for Tape {
    type M = NodeId;
    fn add(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        Tape::add(self, *a, *b)
    }
    fn add_row(&mut self, a: &NodeId, row: &NodeId) -> NodeId {
        Tape::add_row(self, *a, *row)
    }
    fn matmul(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        Tape::matmul(self, *a, *b)
    }
    fn matmul_nt(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        Tape::matmul_nt(self, *a, *b)
    }
    fn scale(&mut self, a: &NodeId, c: f64) -> NodeId {
        Tape::scale(self, *a, c)
    }
    fn softmax_rows(&mut self, a: &NodeId) -> NodeId {
        Tape::softmax_rows(self, *a)
    }
    fn layer_norm(&mut self, x: &NodeId, gain: &NodeId, offset: &NodeId) -> NodeId {
        Tape::layer_norm(self, *x, *gain, *offset)
    }
    fn gelu(&mut self, a: &NodeId) -> NodeId {
        Tape::gelu(self, *a)
    }
    fn gather_rows(&mut self, x: &NodeId, rows: &[usize]) -> NodeId {
        Tape::gather_rows(self, *x, rows)
    }
    fn slice_cols(&mut self, x: &NodeId, start: usize, end: usize) -> NodeId {
        Tape::slice_cols(self, *x, start, end)
    }
    fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        Tape::concat_cols(self, parts)
    }
}

/// Direct (non-recording) evaluation engine.
pub(crate) struct Plain;

impl MatOps for Plain {
    type M = std::sync::Arc<Array2<f64>>;
    fn add(&mut self, a: &Self::M, b: &Self::M) -> Self::M {
        std::sync::Arc::new(&**a + &**b)
    }
    fn add_row(&mut self, a: &Self::M, row: &Self::M) -> Self::M {
        std::sync::Arc::new(&**a + &row.row(0))
    }
    fn matmul(&mut self, a: &Self::M, b: &Self::M) -> Self::M {
        std::sync::Arc::new(a.dot(&**b))
    }
    fn matmul_nt(&mut self, a: &Self::M, b: &Self::M) -> Self::M {
        std::sync::Arc::new(a.dot(&b.t()))
    }
    fn scale(&mut self, a: &Self::M, c: f64) -> Self::M {
        std::sync::Arc::new(&**a * c)
    }
    fn softmax_rows(&mut self, a: &Self::M) -> Self::M {
        std::sync::Arc::new(softmax_rows_k(a))
    }
    fn layer_norm(&mut self, x: &Self::M, gain: &Self::M, offset: &Self::M) -> Self::M {
        std::sync::Arc::new(layer_norm_k(x, gain, offset))
    }
    fn gelu(&mut self, a: &Self::M) -> Self::M {
        std::sync::Arc::new(gelu_k(a))
    }
    fn gather_rows(&mut self, x: &Self::M, rows: &[usize]) -> Self::M {
        let mut v = Array2::zeros((rows.len(), x.ncols()));
        for (r, &i) in rows.iter().enumerate() {
            v.row_mut(r).assign(&x.row(i));
        }
        std::sync::Arc::new(v)
    }
    fn slice_cols(&mut self, x: &Self::M, start: usize, end: usize) -> Self::M {
        std::sync::Arc::new(x.slice(ndarray::s![.., start..end]).to_owned())
    }
    fn concat_cols(&mut self, parts: &[Self::M]) -> Self::M {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        std::sync::Arc::new(ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch"))
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], id: usize, g: Array2<f64>) {
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

// ---- forward kernels, shared with the untaped encoder path ----

pub fn softmax_rows_k(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

pub fn layer_norm_k(x: &Array2<f64>, gain: &Array2<f64>, offset: &Array2<f64>) -> Array2<f64> {
    assert_eq!(gain.nrows(), 1);
    assert_eq!(offset.nrows(), 1);
    let d = x.ncols() as f64;
    let mut out = Array2::zeros(x.dim());
    for (mut orow, xrow) in out.rows_mut().into_iter().zip(x.rows()) {
        let mu = xrow.sum() / d;
        let var = xrow.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (j, o) in orow.iter_mut().enumerate() {
            *o = (xrow[j] - mu) * inv * gain[(0, j)] + offset[(0, j)];
        }
    }
    out
}

fn layer_norm_backward(
    x: &Array2<f64>,
    gain: &Array2<f64>,
    g: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d = x.ncols() as f64;
    let mut dx = Array2::zeros(x.dim());
    let mut dgain = Array2::zeros((1, x.ncols()));
    let mut doffset = Array2::zeros((1, x.ncols()));
    for r in 0..x.nrows() {
        let xrow = x.row(r);
        let grow = g.row(r);
        let mu = xrow.sum() / d;
        let var = xrow.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        let xhat: Vec<f64> = xrow.iter().map(|v| (v - mu) * inv).collect();
        let dxhat: Vec<f64> = (0..x.ncols()).map(|j| grow[j] * gain[(0, j)]).collect();
        let mean_dxhat = dxhat.iter().sum::<f64>() / d;
        let mean_dxhat_xhat = dxhat
            .iter()
            .zip(&xhat)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / d;
        for j in 0..x.ncols() {
            dx[(r, j)] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            dgain[(0, j)] += grow[j] * xhat[j];
            doffset[(0, j)] += grow[j];
        }
    }
    (dx, dgain, doffset)
}

/// GELU with the tanh approximation.
pub fn gelu_k(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(gelu_scalar)
}

fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_C * x.powi(3))).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_C * x.powi(3));
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_C * x * x)
}

/// Cosine similarity; 0 when either vector has (near-)zero norm.
pub fn cosine_k(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na < f64::MIN_POSITIVE || nb < f64::MIN_POSITIVE {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

fn cosine_backward(
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    g: f64,
) -> (ndarray::Array1<f64>, ndarray::Array1<f64>) {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na < f64::MIN_POSITIVE || nb < f64::MIN_POSITIVE {
        return (ndarray::Array1::zeros(a.len()), ndarray::Array1::zeros(b.len()));
    }
    let c = a.dot(&b) / (na * nb);
    let da = (&b / (na * nb) - &(&a * (c / (na * na)))) * g;
    let db = (&a / (na * nb) - &(&b * (c / (nb * nb)))) * g;
    (da, db)
}

pub fn pairwise_mean_cos_k(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            s += cosine_k(a.row(i), b.row(j));
        }
    }
    s / (a.nrows() * b.nrows()) as f64
}

pub fn mean_rows_spans_k(x: &Array2<f64>, spans: &[(usize, usize)]) -> Array2<f64> {
    let mut out = Array2::zeros((spans.len(), x.ncols()));
    for (r, &(s, e)) in spans.iter().enumerate() {
        assert!(s <= e && e < x.nrows(), "span ({s},{e}) out of range");
        let inv = 1.0 / (e - s + 1) as f64;
        for row in s..=e {
            let mut target = out.row_mut(r);
            target.scaled_add(inv, &x.row(row));
        }
    }
    out
}

/// `ln(1 + e^z)` without underflow or overflow.
pub fn stable_softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Two-candidate InfoNCE: `-ln(e^{s⁺/τ} / (e^{s⁺/τ} + e^{s⁻/τ}))`,
/// computed as `softplus((s⁻ - s⁺)/τ)`.
pub fn infonce_k(s_pos: f64, s_neg: f64, tau: f64) -> f64 {
    stable_softplus((s_neg - s_pos) / tau)
}
