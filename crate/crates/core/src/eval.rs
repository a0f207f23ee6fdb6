//! Token-wise span metrics, sentence classification metrics, error taxonomy
//! and candidate reduction statistics.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::corpus::Span;
use crate::error::{Error, Result};

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TokenMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl TokenMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        TokenMetrics {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

/// Micro-averaging: counts are summed and the ratios recomputed.
impl AddAssign for TokenMetrics {
    fn add_assign(&mut self, other: Self) {
        *self = TokenMetrics::from_counts(self.tp + other.tp, self.fp + other.fp, self.fn_ + other.fn_);
    }
}

fn covered(spans: &[Span], n: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; n];
    for span in spans {
        span.validate(n)?;
        mask[span.indices()].iter_mut().for_each(|m| *m = true);
    }
    Ok(mask)
}

/// Compares the token indices covered by the predicted and gold spans of a
/// sentence of `n` tokens. Overlapping spans on either side are unioned.
pub fn token_prf(predicted: &[Span], gold: &[Span], n: usize) -> Result<TokenMetrics> {
    let p = covered(predicted, n)?;
    let g = covered(gold, n)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in p.into_iter().zip(g) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(TokenMetrics::from_counts(tp, fp, fn_))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SentenceMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

pub fn sentence_metrics(predicted: &[bool], gold: &[bool]) -> Result<SentenceMetrics> {
    if predicted.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: predicted.len(),
            right: gold.len(),
        });
    }
    let mut m = SentenceMetrics::default();
    for (&p, &g) in predicted.iter().zip(gold) {
        match (p, g) {
            (true, true) => m.tp += 1,
            (true, false) => m.fp += 1,
            (false, true) => m.fn_ += 1,
            (false, false) => m.tn += 1,
        }
    }
    m.accuracy = ratio(m.tp + m.tn, predicted.len());
    m.precision = ratio(m.tp, m.tp + m.fp);
    m.recall = ratio(m.tp, m.tp + m.fn_);
    m.f1 = harmonic(m.precision, m.recall);
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub boundary: usize,
    pub overlap: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    /// Predicted spans that exactly match a gold span.
    pub exact: usize,
}

impl AddAssign for ErrorCounts {
    fn add_assign(&mut self, o: Self) {
        self.boundary += o.boundary;
        self.overlap += o.overlap;
        self.false_positive += o.false_positive;
        self.false_negative += o.false_negative;
        self.exact += o.exact;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanOutcome {
    Exact,
    Boundary,
    Overlap,
    FalsePositive,
}

/// Classifies one predicted span against the gold span it overlaps most
/// (ties: the earliest gold span). An exact match always wins.
pub fn classify_span(predicted: &Span, gold: &BTreeSet<Span>) -> SpanOutcome {
    if gold.contains(predicted) {
        return SpanOutcome::Exact;
    }
    let mut best: Option<(&Span, usize)> = None;
    for g in gold {
        let overlap = predicted.overlap_len(g);
        if overlap > 0 && best.is_none_or(|(_, o)| overlap > o) {
            best = Some((g, overlap));
        }
    }
    match best {
        None => SpanOutcome::FalsePositive,
        Some((g, _)) if g.contains(predicted) || predicted.contains(g) => SpanOutcome::Boundary,
        Some(_) => SpanOutcome::Overlap,
    }
}

/// Boundary errors (containment either way), overlap errors (straddling),
/// false positives (no gold overlap) and false negatives (gold spans no
/// prediction touches).
pub fn classify_errors(predicted: &BTreeSet<Span>, gold: &BTreeSet<Span>) -> ErrorCounts {
    let mut counts = ErrorCounts::default();
    for p in predicted {
        match classify_span(p, gold) {
            SpanOutcome::Exact => counts.exact += 1,
            SpanOutcome::Boundary => counts.boundary += 1,
            SpanOutcome::Overlap => counts.overlap += 1,
            SpanOutcome::FalsePositive => counts.false_positive += 1,
        }
    }
    counts.false_negative = gold
        .iter()
        .filter(|g| !predicted.iter().any(|p| p.overlaps(g)))
        .count();
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ReductionStats {
    pub total_candidates: usize,
    pub eliminated: usize,
    pub ratio: f64,
}

/// Corpus-level fraction of eliminated candidates from per-sentence
/// `(total, eliminated)` counts.
pub fn reduction_stats(per_sentence: &[(usize, usize)]) -> Result<ReductionStats> {
    let mut stats = ReductionStats::default();
    for &(total, eliminated) in per_sentence {
        if eliminated > total {
            return Err(Error::Precondition(format!(
                "{eliminated} eliminated of {total} candidates"
            )));
        }
        stats.total_candidates += total;
        stats.eliminated += eliminated;
    }
    stats.ratio = ratio(stats.eliminated, stats.total_candidates);
    Ok(stats)
}

impl fmt::Display for TokenMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P={:.4} R={:.4} F1={:.4}", self.precision, self.recall, self.f1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(a: usize, b: usize) -> Span {
        Span::new(a, b)
    }

    fn set(spans: &[Span]) -> BTreeSet<Span> {
        spans.iter().copied().collect()
    }

    #[test]
    fn token_examples() {
        let m = token_prf(&[s(0, 3)], &[s(1, 4)], 5).unwrap();
        assert_eq!(m.tp, 2);
        assert_eq!((m.precision, m.recall), (2.0 / 3.0, 2.0 / 3.0));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);

        let m = token_prf(&[s(1, 3), s(4, 5)], &[s(1, 3), s(4, 5)], 5).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));

        let m = token_prf(&[s(0, 1)], &[s(3, 4)], 5).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn token_empty_and_invalid() {
        let m = token_prf(&[], &[], 3).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!(token_prf(&[s(2, 4)], &[], 3).is_err());
    }

    #[test]
    fn overlapping_gold_is_unioned() {
        let m = token_prf(&[s(0, 4)], &[s(0, 2), s(1, 4), s(1, 4)], 4).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (4, 0, 0));
    }

    #[test]
    fn micro_average() {
        let mut total = TokenMetrics::default();
        total += TokenMetrics::from_counts(1, 1, 0);
        total += TokenMetrics::from_counts(3, 0, 4);
        assert_eq!((total.tp, total.fp, total.fn_), (4, 1, 4));
        assert_eq!(total.precision, 0.8);
        assert_eq!(total.recall, 0.5);
    }

    #[test]
    fn sentence_examples() {
        let all = sentence_metrics(&[true, false, true], &[true, false, true]).unwrap();
        assert_eq!(all.accuracy, 1.0);

        let m = sentence_metrics(&[true; 4], &[true, true, false, false]).unwrap();
        assert_eq!((m.recall, m.precision), (1.0, 0.5));

        let m = sentence_metrics(&[true, false, true, false], &[true, true, false, false]).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall), (0.5, 0.5, 0.5));

        assert!(matches!(
            sentence_metrics(&[true], &[]),
            Err(Error::LengthMismatch { left: 1, right: 0 })
        ));
    }

    #[test]
    fn error_examples() {
        let e = classify_errors(&set(&[s(1, 3)]), &set(&[s(0, 4)]));
        assert_eq!(e, ErrorCounts { boundary: 1, ..Default::default() });

        let e = classify_errors(&set(&[s(0, 6)]), &set(&[s(1, 4)]));
        assert_eq!(e.boundary, 1);

        let e = classify_errors(&set(&[s(2, 6)]), &set(&[s(0, 4)]));
        assert_eq!(e, ErrorCounts { overlap: 1, ..Default::default() });

        let e = classify_errors(&set(&[s(0, 1)]), &set(&[s(5, 6)]));
        assert_eq!((e.false_positive, e.false_negative), (1, 1));

        let e = classify_errors(&set(&[s(2, 4)]), &set(&[s(2, 4)]));
        assert_eq!(e, ErrorCounts { exact: 1, ..Default::default() });
    }

    #[test]
    fn classification_uses_largest_overlap() {
        // overlaps [4, 9) by three tokens and [0, 3) by one
        let gold = set(&[s(0, 3), s(4, 9)]);
        assert_eq!(classify_span(&s(2, 7), &gold), SpanOutcome::Overlap);
        assert_eq!(classify_span(&s(5, 7), &gold), SpanOutcome::Boundary);
        // equal overlaps: the earliest gold span decides
        let gold = set(&[s(0, 4), s(5, 7)]);
        assert_eq!(classify_span(&s(3, 6), &gold), SpanOutcome::Overlap);
        let gold = set(&[s(2, 4), s(4, 9)]);
        assert_eq!(classify_span(&s(2, 6), &gold), SpanOutcome::Boundary);
    }

    #[test]
    fn reduction_examples() {
        let r = reduction_stats(&[(10, 2), (10, 0)]).unwrap();
        assert_eq!(r.ratio, 0.1);
        assert_eq!(reduction_stats(&[(10, 0), (5, 0)]).unwrap().ratio, 0.0);
        assert_eq!(reduction_stats(&[]).unwrap().ratio, 0.0);
        assert!(reduction_stats(&[(1, 2)]).is_err());
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        fn spans(n: usize) -> impl Strategy<Value = Vec<Span>> {
            proptest::collection::vec((0..n, 1..=n), 0..5).prop_map(move |v| {
                v.into_iter()
                    .map(|(a, len)| Span::new(a, (a + len).min(n)))
                    .filter(|s| s.start < s.end)
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn f1_symmetric_under_swap(p in spans(12), g in spans(12)) {
                let a = token_prf(&p, &g, 12).unwrap();
                let b = token_prf(&g, &p, 12).unwrap();
                prop_assert_eq!(a.precision, b.recall);
                prop_assert_eq!(a.recall, b.precision);
                prop_assert!((a.f1 - b.f1).abs() < 1e-15);
            }

            #[test]
            fn each_prediction_gets_one_outcome(p in spans(12), g in spans(12)) {
                let (p, g) = (set(&p), set(&g));
                let e = classify_errors(&p, &g);
                prop_assert_eq!(e.exact + e.boundary + e.overlap + e.false_positive, p.len());
                let untouched = g.iter().filter(|x| p.iter().all(|y| !y.overlaps(x))).count();
                prop_assert_eq!(e.false_negative, untouched);
            }
        }
    }
}
