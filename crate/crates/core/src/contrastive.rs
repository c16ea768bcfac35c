//! Two-level contrastive losses over segment representations.
//!
//! The segment-level loss contrasts the sentence vector against the pooled
//! chosen segmentation (positive) versus a pooled random segmentation with
//! the same segment count (negative). The sentence-level loss contrasts a
//! cropped anchor against same-intent and different-intent utterances. Both
//! use two-candidate InfoNCE computed through a stable softplus.

use std::collections::BTreeSet;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probing::{Provenance, Segmentation, SegmentMatrix};
use crate::tape::{cosine_k, infonce_k, mean_rows_spans_k, pairwise_mean_cos_k, NodeId, Tape};

/// Coefficients of the combined objective: delta scales the segment-level
/// term, gamma the sentence-level term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub delta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be non-negative, got delta={} gamma={}",
                self.delta, self.gamma
            )));
        }
        Ok(())
    }
}

/// InfoNCE temperatures: tau_s for the segment level, tau_d for the
/// sentence level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    pub tau_s: f64,
    pub tau_d: f64,
}

impl Temperatures {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_s > 0.0 && self.tau_d > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperatures must be strictly positive, got tau_s={} tau_d={}",
                self.tau_s, self.tau_d
            )));
        }
        Ok(())
    }
}

/// One training step's anchor/positive/negative utterance ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveBatch {
    pub anchors: Vec<String>,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
}

/// How a (vector-or-matrix, matrix) cosine is reduced to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimReduction {
    /// Mean-pool each argument's rows to one vector, then cosine.
    #[default]
    Pool,
    /// Mean of cosines over all row pairs.
    MeanRowCos,
}

impl FromStr for SimReduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pool" => Ok(SimReduction::Pool),
            "mean_rowcos" => Ok(SimReduction::MeanRowCos),
            other => Err(Error::InvalidConfig(format!(
                "unknown similarity reduction `{other}` (pool | mean_rowcos)"
            ))),
        }
    }
}

/// Samples a segmentation with `m` spans by drawing m-1 distinct cut
/// positions from {1..T-1}.
///
/// When `avoid` carries the cut set of an already-chosen segmentation, the
/// draw is retried (up to 16 times) until it differs; `None` is returned
/// when no distinct alternative exists — the caller then skips the
/// segment-level loss for this utterance.
pub fn random_segmentation(
    t: usize,
    m: usize,
    seed: u64,
    avoid: Option<&BTreeSet<usize>>,
) -> Result<Option<Segmentation>> {
    if m == 0 || m > t {
        return Err(Error::InvalidSegmentation(format!(
            "cannot split {t} tokens into {m} segments"
        )));
    }
    // The m-segmentation is unique exactly when m == 1 (no cuts) or m == T
    // (all cuts); a constrained draw is then degenerate.
    if let Some(avoid_cuts) = avoid {
        if m == 1 || m == t {
            let unique = Segmentation::from_cuts(t, &all_or_no_cuts(t, m), Provenance::Random { seed });
            if &unique.cut_set() == avoid_cuts {
                return Ok(None);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..16 {
        let picked = rand::seq::index::sample(&mut rng, t - 1, m - 1);
        let cuts: BTreeSet<usize> = picked.iter().map(|i| i + 1).collect();
        if avoid == Some(&cuts) {
            continue;
        }
        return Ok(Some(Segmentation::from_cuts(
            t,
            &cuts,
            Provenance::Random { seed },
        )));
    }
    Ok(None)
}

fn all_or_no_cuts(t: usize, m: usize) -> BTreeSet<usize> {
    if m == 1 {
        BTreeSet::new()
    } else {
        (1..t).collect()
    }
}

/// Cosine similarity between two row collections under the configured
/// reduction; single vectors enter as 1-row matrices.
pub fn matrix_similarity(a: &Array2<f64>, b: &Array2<f64>, red: SimReduction) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "similarity widths differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::ShapeMismatch("similarity over empty matrix".into()));
    }
    Ok(match red {
        SimReduction::Pool => {
            // Same pooling kernel as the taped path so the two agree bitwise.
            let va = mean_rows_spans_k(a, &[(0, a.nrows() - 1)]);
            let vb = mean_rows_spans_k(b, &[(0, b.nrows() - 1)]);
            cosine_k(va.row(0), vb.row(0))
        }
        SimReduction::MeanRowCos => pairwise_mean_cos_k(a, b),
    })
}

fn vector_as_row(v: &Array1<f64>) -> Array2<f64> {
    v.view().insert_axis(Axis(0)).to_owned()
}

/// Segment-level InfoNCE: sentence vector vs chosen pooled segmentation
/// (positive) and random pooled segmentation (negative).
pub fn seg_cl_loss(
    h_c: &Array1<f64>,
    h_u: &SegmentMatrix,
    h_r: &SegmentMatrix,
    tau_s: f64,
    red: SimReduction,
) -> Result<f64> {
    if tau_s <= 0.0 {
        return Err(Error::InvalidConfig(format!("tau_s must be > 0, got {tau_s}")));
    }
    let hc = vector_as_row(h_c);
    let s_pos = matrix_similarity(&hc, &h_u.rows, red)?;
    let s_neg = matrix_similarity(&hc, &h_r.rows, red)?;
    if !s_pos.is_finite() || !s_neg.is_finite() {
        return Err(Error::NonFinite("segment-level similarity".into()));
    }
    Ok(infonce_k(s_pos, s_neg, tau_s))
}

/// Row indices kept after removing `ceil(beta * m)` uniformly chosen rows,
/// capped so at least one row survives; sorted, deterministic per seed.
pub fn crop_keep_indices(m: usize, beta: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidConfig(format!(
            "crop ratio must be in [0, 1), got {beta}"
        )));
    }
    if m == 0 {
        return Err(Error::InvalidSegmentation("cropping an empty matrix".into()));
    }
    let n_remove = ((beta * m as f64).ceil() as usize).min(m - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let removed: BTreeSet<usize> = rand::seq::index::sample(&mut rng, m, n_remove)
        .iter()
        .collect();
    Ok((0..m).filter(|i| !removed.contains(i)).collect())
}

/// Removes cropped rows from a pooled segment matrix.
pub fn crop_segments(seg: &SegmentMatrix, beta: f64, seed: u64) -> Result<SegmentMatrix> {
    let keep = crop_keep_indices(seg.rows.nrows(), beta, seed)?;
    let mut rows = Array2::zeros((keep.len(), seg.rows.ncols()));
    for (r, &i) in keep.iter().enumerate() {
        rows.row_mut(r).assign(&seg.rows.row(i));
    }
    Ok(SegmentMatrix { rows })
}

/// Sentence-level InfoNCE: anchor segments vs same-intent (positive) and
/// different-intent (negative) segment matrices; any cropping happens
/// before this call.
pub fn sent_cl_loss(
    h_a: &SegmentMatrix,
    h_pos: &SegmentMatrix,
    h_neg: &SegmentMatrix,
    tau_d: f64,
    red: SimReduction,
) -> Result<f64> {
    if tau_d <= 0.0 {
        return Err(Error::InvalidConfig(format!("tau_d must be > 0, got {tau_d}")));
    }
    let s_pos = matrix_similarity(&h_a.rows, &h_pos.rows, red)?;
    let s_neg = matrix_similarity(&h_a.rows, &h_neg.rows, red)?;
    if !s_pos.is_finite() || !s_neg.is_finite() {
        return Err(Error::NonFinite("sentence-level similarity".into()));
    }
    Ok(infonce_k(s_pos, s_neg, tau_d))
}

/// Combined objective `delta * L_s + gamma * L_d`; utterances whose
/// segment-level draw was degenerate contribute the sentence term only.
pub fn total_loss(l_s: Option<f64>, l_d: f64, w: &LossWeights) -> f64 {
    w.delta * l_s.unwrap_or(0.0) + w.gamma * l_d
}

// ---- taped counterparts (identical kernels, used during training) ----

/// Similarity node between two row-collection nodes.
pub fn matrix_similarity_on_tape(
    tape: &mut Tape,
    a: NodeId,
    b: NodeId,
    red: SimReduction,
) -> NodeId {
    match red {
        SimReduction::Pool => {
            let na = tape.value(a).nrows();
            let nb = tape.value(b).nrows();
            let va = tape.mean_rows_spans(a, &[(0, na - 1)]);
            let vb = tape.mean_rows_spans(b, &[(0, nb - 1)]);
            tape.cosine(va, vb)
        }
        SimReduction::MeanRowCos => tape.pairwise_mean_cos(a, b),
    }
}

/// Taped segment-level InfoNCE; `h_c` is a 1-row node.
pub fn seg_cl_on_tape(
    tape: &mut Tape,
    h_c: NodeId,
    h_u: NodeId,
    h_r: NodeId,
    tau_s: f64,
    red: SimReduction,
) -> NodeId {
    let s_pos = matrix_similarity_on_tape(tape, h_c, h_u, red);
    let s_neg = matrix_similarity_on_tape(tape, h_c, h_r, red);
    tape.infonce(s_pos, s_neg, tau_s)
}

/// Taped sentence-level InfoNCE over (already cropped) segment nodes.
pub fn sent_cl_on_tape(
    tape: &mut Tape,
    h_a: NodeId,
    h_pos: NodeId,
    h_neg: NodeId,
    tau_d: f64,
    red: SimReduction,
) -> NodeId {
    let s_pos = matrix_similarity_on_tape(tape, h_a, h_pos, red);
    let s_neg = matrix_similarity_on_tape(tape, h_a, h_neg, red);
    tape.infonce(s_pos, s_neg, tau_d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::RngExt;

    fn segm(rows: Array2<f64>) -> SegmentMatrix {
        SegmentMatrix { rows }
    }

    #[test]
    fn equal_similarities_give_ln_2() {
        let h_c = array![1.0, 2.0, 3.0];
        let m = segm(array![[0.5, 0.1, 0.2], [0.3, 0.4, 0.0]]);
        let l = seg_cl_loss(&h_c, &m, &m.clone(), 0.1, SimReduction::Pool).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-9);

        let a = segm(array![[1.0, 0.0], [0.0, 1.0]]);
        let p = segm(array![[2.0, 1.0]]);
        let l = sent_cl_loss(&a, &p, &p.clone(), 0.05, SimReduction::Pool).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn infonce_closed_forms() {
        // similarities 0.8 vs 0.2 at temperature 0.1:
        // -ln(e^8 / (e^8 + e^2)) = ln(e^8 + e^2) - 8
        let expect = ((8.0f64).exp() + (2.0f64).exp()).ln() - 8.0;
        let got = infonce_k(0.8, 0.2, 0.1);
        assert!((got - expect).abs() / expect < 1e-12);
        assert!((got - 0.0024757).abs() < 5e-8);

        // similarities 1 vs -1 at temperature 0.05: ln(1 + e^-40) ~ e^-40
        let got = infonce_k(1.0, -1.0, 0.05);
        let expect = (-40.0f64).exp();
        assert!((got - expect).abs() / expect < 1e-12);
        assert!(got > 0.0 && got < 5e-18);
    }

    #[test]
    fn seg_cl_is_monotone_in_both_similarities() {
        // Increase the positive similarity -> loss must drop; increase the
        // negative similarity -> loss must rise.
        let base = infonce_k(0.3, 0.1, 0.1);
        assert!(infonce_k(0.3 + 1e-3, 0.1, 0.1) < base);
        assert!(infonce_k(0.3, 0.1 + 1e-3, 0.1) > base);
    }

    #[test]
    fn matrix_similarity_examples() {
        let a = array![[1.0, 0.0], [0.0, 1.0]];
        assert!((matrix_similarity(&a, &a, SimReduction::Pool).unwrap() - 1.0).abs() < 1e-12);
        let e1 = array![[1.0, 0.0]];
        let e2 = array![[0.0, 1.0]];
        assert_eq!(matrix_similarity(&e1, &e2, SimReduction::Pool).unwrap(), 0.0);
        let s = matrix_similarity(&a, &e1, SimReduction::Pool).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-4);

        let wide = array![[1.0, 0.0, 0.0]];
        assert!(matches!(
            matrix_similarity(&a, &wide, SimReduction::Pool),
            Err(Error::ShapeMismatch(_))
        ));

        let zero = Array2::zeros((2, 2));
        assert_eq!(matrix_similarity(&zero, &a, SimReduction::Pool).unwrap(), 0.0);
    }

    #[test]
    fn taped_losses_match_plain_losses_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h_a = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let h_p = Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0));
        let h_n = Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0));
        let h_c = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        for red in [SimReduction::Pool, SimReduction::MeanRowCos] {
            let plain_s = seg_cl_loss(&h_c, &segm(h_p.clone()), &segm(h_n.clone()), 0.1, red)
                .unwrap();
            let plain_d = sent_cl_loss(
                &segm(h_a.clone()),
                &segm(h_p.clone()),
                &segm(h_n.clone()),
                0.05,
                red,
            )
            .unwrap();
            let mut tape = Tape::new();
            let na = tape.leaf(h_a.clone());
            let np = tape.leaf(h_p.clone());
            let nn = tape.leaf(h_n.clone());
            let nc = tape.leaf(vector_as_row(&h_c));
            let ls = seg_cl_on_tape(&mut tape, nc, np, nn, 0.1, red);
            let ld = sent_cl_on_tape(&mut tape, na, np, nn, 0.05, red);
            assert_eq!(tape.scalar(ls), plain_s);
            assert_eq!(tape.scalar(ld), plain_d);
        }
    }

    #[test]
    fn crop_examples_and_determinism() {
        let m5 = segm(Array2::from_shape_fn((5, 3), |(r, c)| (r * 3 + c) as f64));
        let cropped = crop_segments(&m5, 0.2, 42).unwrap();
        assert_eq!(cropped.rows.nrows(), 4);
        let again = crop_segments(&m5, 0.2, 42).unwrap();
        assert_eq!(cropped, again);

        let identity = crop_segments(&m5, 0.0, 1).unwrap();
        assert_eq!(identity.rows, m5.rows);

        let m1 = segm(array![[1.0, 2.0]]);
        let capped = crop_segments(&m1, 0.5, 7).unwrap();
        assert_eq!(capped.rows, m1.rows);

        assert!(crop_keep_indices(5, 1.0, 0).is_err());
    }

    #[test]
    fn random_segmentation_mechanics() {
        // m = 1 without an avoid set: whole-span segmentation.
        let seg = random_segmentation(5, 1, 0, None).unwrap().unwrap();
        assert_eq!(seg.spans, vec![(0, 4)]);

        // All-singleton segmentation is unique: degenerate under avoidance.
        let avoid: BTreeSet<usize> = (1..4).collect();
        assert!(random_segmentation(4, 4, 0, Some(&avoid)).unwrap().is_none());

        // One-segment draw avoiding the one-segment cut set: degenerate.
        let empty = BTreeSet::new();
        assert!(random_segmentation(5, 1, 0, Some(&empty)).unwrap().is_none());

        // T=6, m=3: two distinct cuts in {1..5}, valid partition, seeded.
        let a = random_segmentation(6, 3, 9, None).unwrap().unwrap();
        let b = random_segmentation(6, 3, 9, None).unwrap().unwrap();
        assert_eq!(a, b);
        a.validate(6).unwrap();
        assert_eq!(a.m(), 3);
        for &(s, _) in &a.spans[1..] {
            assert!((1..=5).contains(&s));
        }

        assert!(random_segmentation(3, 4, 0, None).is_err());
    }

    #[test]
    fn random_segmentation_respects_avoid_set() {
        let avoid: BTreeSet<usize> = [2usize].into_iter().collect();
        for seed in 0..200 {
            let seg = random_segmentation(4, 2, seed, Some(&avoid)).unwrap().unwrap();
            assert_ne!(seg.cut_set(), avoid, "seed {seed} reproduced the avoided cuts");
            seg.validate(4).unwrap();
        }
    }

    #[test]
    fn total_loss_combinations() {
        let w = LossWeights { delta: 1.0, gamma: 0.2 };
        assert!((total_loss(Some(1.0), 1.0, &w) - 1.2).abs() < 1e-15);
        let w0 = LossWeights { delta: 0.0, gamma: 0.0 };
        assert_eq!(total_loss(Some(3.0), 4.0, &w0), 0.0);
        let snips = LossWeights { delta: 0.3, gamma: 0.7 };
        assert!((total_loss(None, 2.0, &snips) - 1.4).abs() < 1e-15);
        assert!(LossWeights { delta: -0.1, gamma: 0.0 }.validate().is_err());
        assert!(Temperatures { tau_s: 0.0, tau_d: 0.1 }.validate().is_err());
    }

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn crop_always_keeps_expected_count(m in 1usize..20, beta in 0.0f64..0.99, seed: u64) {
            let keep = crop_keep_indices(m, beta, seed).unwrap();
            let expect = std::cmp::max(1, m - (beta * m as f64).ceil() as usize);
            prop_assert_eq!(keep.len(), expect);
            prop_assert!(keep.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(keep.iter().all(|&i| i < m));
        }

        #[test]
        fn similarity_is_symmetric_and_permutation_invariant(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
            let b = Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0));
            for red in [SimReduction::Pool, SimReduction::MeanRowCos] {
                let ab = matrix_similarity(&a, &b, red).unwrap();
                let ba = matrix_similarity(&b, &a, red).unwrap();
                prop_assert!((ab - ba).abs() < 1e-12);
                prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&ab));
                // Reverse the rows of `a`.
                let mut rev = a.clone();
                for (r, row) in a.rows().into_iter().enumerate() {
                    rev.row_mut(2 - r).assign(&row);
                }
                let rab = matrix_similarity(&rev, &b, red).unwrap();
                prop_assert!((ab - rab).abs() < 1e-12);
            }
        }
    }
}
