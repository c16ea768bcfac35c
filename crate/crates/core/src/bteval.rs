//! Break/Tie boundary scoring against gold labels with NA masking.
//!
//! Predicted segmentations are flattened to Break/Tie decisions, gold-NA
//! positions (both neighbours outside any slot) are excluded, and each label
//! is scored one-vs-rest. The headline number is the harmonic mean of the
//! two F1 scores.

use serde::{Deserialize, Serialize};

use crate::corpus::{BtLabel, BtSequence};
use crate::error::{Error, Result};
use crate::probing::Segmentation;

/// One-vs-rest confusion counts for both labels; merged additively across
/// utterances for micro aggregation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp_b: u64,
    pub fp_b: u64,
    pub fn_b: u64,
    pub tp_t: u64,
    pub fp_t: u64,
    pub fn_t: u64,
    pub n_boundaries_scored: u64,
}

impl Counts {
    pub fn merge(&mut self, other: &Counts) {
        self.tp_b += other.tp_b;
        self.fp_b += other.fp_b;
        self.fn_b += other.fn_b;
        self.tp_t += other.tp_t;
        self.fp_t += other.fp_t;
        self.fn_t += other.fn_t;
        self.n_boundaries_scored += other.n_boundaries_scored;
    }
}

/// Per-label precision/recall/F1 plus their harmonic mean, in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub b_p: f64,
    pub b_r: f64,
    pub b_f1: f64,
    pub t_p: f64,
    pub t_r: f64,
    pub t_f1: f64,
    pub h_mean: f64,
    pub counts: Counts,
}

/// How per-utterance scores are combined into a corpus-level report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Sum confusion counts across utterances, then compute metrics once.
    #[default]
    Micro,
    /// Mean of per-utterance metrics; utterances with no scored boundaries
    /// are skipped.
    Macro,
}

/// Flattens a segmentation to boundary decisions: Break where a new span
/// starts, Tie inside a span. Predictions never emit NA.
pub fn segmentation_to_bt(seg: &Segmentation, t: usize) -> Result<BtSequence> {
    seg.validate(t)?;
    let cuts = seg.cut_set();
    let labels = (1..t)
        .map(|p| if cuts.contains(&p) { BtLabel::Break } else { BtLabel::Tie })
        .collect();
    Ok(BtSequence { labels })
}

/// Scores one utterance's predicted boundaries against gold; gold-NA
/// positions are excluded from every count.
pub fn score_bt(pred: &BtSequence, gold: &BtSequence) -> Result<Counts> {
    if pred.len() != gold.len() {
        return Err(Error::ShapeMismatch(format!(
            "boundary sequences differ in length: pred {} vs gold {}",
            pred.len(),
            gold.len()
        )));
    }
    let mut c = Counts::default();
    for (&p, &g) in pred.labels.iter().zip(&gold.labels) {
        if g == BtLabel::Na {
            continue;
        }
        c.n_boundaries_scored += 1;
        match (p, g) {
            (BtLabel::Break, BtLabel::Break) => c.tp_b += 1,
            (BtLabel::Break, BtLabel::Tie) => {
                c.fp_b += 1;
                c.fn_t += 1;
            }
            (BtLabel::Tie, BtLabel::Break) => {
                c.fn_b += 1;
                c.fp_t += 1;
            }
            (BtLabel::Tie, BtLabel::Tie) => c.tp_t += 1,
            (BtLabel::Na, _) => {
                return Err(Error::InvalidConfig(
                    "predicted boundary sequences must not contain NA".into(),
                ))
            }
            (_, BtLabel::Na) => unreachable!("gold NA skipped above"),
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64, what: &str) -> f64 {
    if den == 0 {
        log::warn!("{what} has zero denominator; reporting 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Harmonic mean of the two F1 scores; 0 when both are 0. Scale-free: works
/// for values in [0, 1] or percentages alike.
pub fn h_mean(b_f1: f64, t_f1: f64) -> f64 {
    if b_f1 + t_f1 == 0.0 {
        0.0
    } else {
        2.0 * b_f1 * t_f1 / (b_f1 + t_f1)
    }
}

/// Computes metrics from (possibly merged) confusion counts.
pub fn report_from_counts(counts: Counts) -> MetricsReport {
    if counts.n_boundaries_scored == 0 {
        log::warn!("no boundaries scored (gold is all NA); reporting zeros");
    }
    let b_p = ratio(counts.tp_b, counts.tp_b + counts.fp_b, "Break precision");
    let b_r = ratio(counts.tp_b, counts.tp_b + counts.fn_b, "Break recall");
    let t_p = ratio(counts.tp_t, counts.tp_t + counts.fp_t, "Tie precision");
    let t_r = ratio(counts.tp_t, counts.tp_t + counts.fn_t, "Tie recall");
    let b_f1 = f1(b_p, b_r);
    let t_f1 = f1(t_p, t_r);
    MetricsReport {
        b_p,
        b_r,
        b_f1,
        t_p,
        t_r,
        t_f1,
        h_mean: h_mean(b_f1, t_f1),
        counts,
    }
}

/// Corpus-level report over aligned (pred, gold) sequences.
pub fn score_corpus(
    preds: &[BtSequence],
    golds: &[BtSequence],
    agg: Aggregation,
) -> Result<MetricsReport> {
    if preds.len() != golds.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction/gold corpus sizes differ: {} vs {}",
            preds.len(),
            golds.len()
        )));
    }
    let mut total = Counts::default();
    let mut per_utt: Vec<MetricsReport> = Vec::new();
    for (p, g) in preds.iter().zip(golds) {
        let c = score_bt(p, g)?;
        total.merge(&c);
        if agg == Aggregation::Macro && c.n_boundaries_scored > 0 {
            per_utt.push(report_from_counts(c));
        }
    }
    match agg {
        Aggregation::Micro => Ok(report_from_counts(total)),
        Aggregation::Macro => {
            if per_utt.is_empty() {
                return Ok(report_from_counts(total));
            }
            let n = per_utt.len() as f64;
            let mean = |f: fn(&MetricsReport) -> f64| per_utt.iter().map(f).sum::<f64>() / n;
            Ok(MetricsReport {
                b_p: mean(|r| r.b_p),
                b_r: mean(|r| r.b_r),
                b_f1: mean(|r| r.b_f1),
                t_p: mean(|r| r.t_p),
                t_r: mean(|r| r.t_r),
                t_f1: mean(|r| r.t_f1),
                h_mean: mean(|r| r.h_mean),
                counts: total,
            })
        }
    }
}

/// Plain-text table, values ×100 at 2 decimals, fixed column order.
pub fn format_table(r: &MetricsReport) -> String {
    let header = ["B-P", "B-R", "B-F1", "T-P", "T-R", "T-F1", "H-Mean"];
    let vals = [r.b_p, r.b_r, r.b_f1, r.t_p, r.t_r, r.t_f1, r.h_mean];
    let cells: Vec<String> = vals.iter().map(|v| format!("{:.2}", v * 100.0)).collect();
    let widths: Vec<usize> = header
        .iter()
        .zip(&cells)
        .map(|(h, c)| h.len().max(c.len()))
        .collect();
    let mut head = String::new();
    let mut row = String::new();
    for i in 0..header.len() {
        if i > 0 {
            head.push_str("  ");
            row.push_str("  ");
        }
        head.push_str(&format!("{:>w$}", header[i], w = widths[i]));
        row.push_str(&format!("{:>w$}", cells[i], w = widths[i]));
    }
    format!("{head}\n{row}\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probing::Provenance;
    use proptest::prelude::*;

    fn seq(s: &str) -> BtSequence {
        let labels = s
            .split_whitespace()
            .map(|w| match w {
                "B" => BtLabel::Break,
                "T" => BtLabel::Tie,
                "NA" => BtLabel::Na,
                other => panic!("bad label {other}"),
            })
            .collect();
        BtSequence { labels }
    }

    #[test]
    fn worked_example_confusion() {
        let gold = seq("NA B T B");
        let pred = seq("B B T T");
        let r = report_from_counts(score_bt(&pred, &gold).unwrap());
        assert_eq!(r.counts.n_boundaries_scored, 3);
        assert_eq!(r.b_p, 1.0);
        assert_eq!(r.b_r, 0.5);
        assert!((r.b_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.t_p, 0.5);
        assert_eq!(r.t_r, 1.0);
        assert!((r.t_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.h_mean - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gold = seq("B T B T");
        let r = report_from_counts(score_bt(&gold, &gold).unwrap());
        for v in [r.b_p, r.b_r, r.b_f1, r.t_p, r.t_r, r.t_f1, r.h_mean] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn gold_all_na_reports_zeros() {
        let gold = seq("NA NA NA");
        let pred = seq("B T B");
        let r = report_from_counts(score_bt(&pred, &gold).unwrap());
        assert_eq!(r.counts.n_boundaries_scored, 0);
        for v in [r.b_p, r.b_r, r.b_f1, r.t_p, r.t_r, r.t_f1, r.h_mean] {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn length_mismatch_and_na_prediction_rejected() {
        assert!(score_bt(&seq("B"), &seq("B T")).is_err());
        assert!(score_bt(&seq("NA B"), &seq("B B")).is_err());
    }

    #[test]
    fn h_mean_published_triples() {
        assert!((h_mean(96.76, 73.47) - 83.52).abs() < 0.01);
        assert!((h_mean(70.38, 54.77) - 61.60).abs() < 0.01);
        assert!((h_mean(98.91, 58.67) - 73.65).abs() < 0.01);
        assert_eq!(h_mean(0.0, 0.0), 0.0);
        assert_eq!(h_mean(0.7, 0.7), 0.7);
    }

    #[test]
    fn segmentation_to_bt_examples() {
        let seg = Segmentation {
            spans: vec![(0, 1), (2, 3), (4, 4)],
            provenance: Provenance::External,
        };
        assert_eq!(segmentation_to_bt(&seg, 5).unwrap(), seq("T B T B"));

        let whole = Segmentation {
            spans: vec![(0, 4)],
            provenance: Provenance::External,
        };
        assert_eq!(segmentation_to_bt(&whole, 5).unwrap(), seq("T T T T"));

        let singles = Segmentation {
            spans: (0..5).map(|i| (i, i)).collect(),
            provenance: Provenance::External,
        };
        assert_eq!(segmentation_to_bt(&singles, 5).unwrap(), seq("B B B B"));

        assert!(segmentation_to_bt(&whole, 6).is_err());
    }

    #[test]
    fn micro_is_order_invariant_and_macro_differs() {
        let golds = vec![seq("B T B"), seq("T T"), seq("NA NA")];
        let preds = vec![seq("B B B"), seq("T B"), seq("T T")];
        let fwd = score_corpus(&preds, &golds, Aggregation::Micro).unwrap();
        let rev_p: Vec<_> = preds.iter().rev().cloned().collect();
        let rev_g: Vec<_> = golds.iter().rev().cloned().collect();
        let bwd = score_corpus(&rev_p, &rev_g, Aggregation::Micro).unwrap();
        assert_eq!(fwd, bwd);

        let mac = score_corpus(&preds, &golds, Aggregation::Macro).unwrap();
        // Same merged counts either way; metric values are means here.
        assert_eq!(mac.counts, fwd.counts);
        assert!(mac.h_mean != fwd.h_mean);
    }

    #[test]
    fn table_layout() {
        let gold = seq("NA B T B");
        let pred = seq("B B T T");
        let r = report_from_counts(score_bt(&pred, &gold).unwrap());
        let table = format_table(&r);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[0].split_whitespace().collect::<Vec<_>>(),
            vec!["B-P", "B-R", "B-F1", "T-P", "T-R", "T-F1", "H-Mean"]
        );
        assert_eq!(
            lines[1].split_whitespace().collect::<Vec<_>>(),
            vec!["100.00", "50.00", "66.67", "50.00", "100.00", "66.67", "66.67"]
        );
    }

    /// Naive recount written independently of `score_bt`.
    fn oracle(pred: &BtSequence, gold: &BtSequence) -> (f64, f64, f64, f64, f64, f64, f64) {
        let pairs: Vec<(BtLabel, BtLabel)> = pred
            .labels
            .iter()
            .zip(&gold.labels)
            .filter(|(_, g)| **g != BtLabel::Na)
            .map(|(p, g)| (*p, *g))
            .collect();
        let count = |f: &dyn Fn(&(BtLabel, BtLabel)) -> bool| pairs.iter().filter(|x| f(x)).count() as f64;
        let prf = |label: BtLabel| {
            let tp = count(&|&(p, g)| p == label && g == label);
            let pred_n = count(&|&(p, _)| p == label);
            let gold_n = count(&|&(_, g)| g == label);
            let p = if pred_n == 0.0 { 0.0 } else { tp / pred_n };
            let r = if gold_n == 0.0 { 0.0 } else { tp / gold_n };
            let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            (p, r, f)
        };
        let (bp, br, bf) = prf(BtLabel::Break);
        let (tp, tr, tf) = prf(BtLabel::Tie);
        let h = if bf + tf == 0.0 { 0.0 } else { 2.0 * bf * tf / (bf + tf) };
        (bp, br, bf, tp, tr, tf, h)
    }

    proptest! {
        #[test]
        fn matches_independent_recount(
            pg in proptest::collection::vec((0u8..2, 0u8..3), 1..10)
        ) {
            let pred = BtSequence {
                labels: pg.iter().map(|&(p, _)| if p == 0 { BtLabel::Break } else { BtLabel::Tie }).collect(),
            };
            let gold = BtSequence {
                labels: pg.iter().map(|&(_, g)| match g {
                    0 => BtLabel::Break,
                    1 => BtLabel::Tie,
                    _ => BtLabel::Na,
                }).collect(),
            };
            let r = report_from_counts(score_bt(&pred, &gold).unwrap());
            let (bp, br, bf, tp, tr, tf, h) = oracle(&pred, &gold);
            prop_assert!((r.b_p - bp).abs() < 1e-12);
            prop_assert!((r.b_r - br).abs() < 1e-12);
            prop_assert!((r.b_f1 - bf).abs() < 1e-12);
            prop_assert!((r.t_p - tp).abs() < 1e-12);
            prop_assert!((r.t_r - tr).abs() < 1e-12);
            prop_assert!((r.t_f1 - tf).abs() < 1e-12);
            prop_assert!((r.h_mean - h).abs() < 1e-12);
            // Count conservation: gold Break count among scored positions.
            let gold_b = gold.labels.iter().zip(&pred.labels)
                .filter(|(g, _)| **g == BtLabel::Break).count() as u64;
            prop_assert_eq!(r.counts.tp_b + r.counts.fn_b, gold_b);
        }

        #[test]
        fn h_mean_bounds(b in 0.0f64..1.0, t in 0.0f64..1.0) {
            let h = h_mean(b, t);
            prop_assert!(h <= (b + t) / 2.0 + 1e-12);
            prop_assert!(h >= 0.0);
            if b > 0.0 && t > 0.0 {
                prop_assert!(h >= b.min(t) - 1e-12);
            }
        }
    }
}
