//! Top-K selection of non-overlapping spans and per-sentence detection.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{PicoType, SentenceRecord, Span};
use crate::engine::{score_candidates_from, ScoredSpan, SpanConfig, SpanScoring};
use crate::error::{Error, Result};
use crate::labels::{derive_sentence_label, LabelMode};
use crate::scorer::{score_sentence, SentenceScorer};

/// Highest contribution first; ties go to the earlier, then the shorter span.
pub fn selection_order(a: &ScoredSpan, b: &ScoredSpan) -> Ordering {
    b.contribution
        .total_cmp(&a.contribution)
        .then(a.span.start.cmp(&b.span.start))
        .then(a.span.len().cmp(&b.span.len()))
}

/// Greedily picks up to `k` pairwise non-overlapping spans with positive
/// contribution, best first.
pub fn top_k_select(candidates: &[ScoredSpan], k: usize) -> Vec<Span> {
    let mut pool: Vec<&ScoredSpan> = candidates.iter().filter(|c| c.contribution > 0.0).collect();
    pool.sort_by(|a, b| selection_order(a, b));

    let mut taken: Vec<bool> = Vec::new();
    let mut selected = Vec::new();
    for c in pool {
        if selected.len() >= k {
            break;
        }
        let span = c.span;
        if taken.len() < span.end {
            taken.resize(span.end, false);
        }
        if taken[span.indices()].iter().any(|t| *t) {
            continue;
        }
        taken[span.indices()].iter_mut().for_each(|t| *t = true);
        selected.push(span);
    }
    selected
}

/// What decides whether a sentence is searched for spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    /// The scorer's own sentence classification.
    Predicted,
    CrowdAgg,
    CrowdMajor,
    CrowdMinor,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Predicted, Gate::CrowdAgg, Gate::CrowdMajor, Gate::CrowdMinor];

    pub fn as_str(self) -> &'static str {
        match self {
            Gate::Predicted => "predicted",
            Gate::CrowdAgg => "crowd_agg",
            Gate::CrowdMajor => "crowd_major",
            Gate::CrowdMinor => "crowd_minor",
        }
    }

    fn label_mode(self) -> Option<LabelMode> {
        match self {
            Gate::Predicted => None,
            Gate::CrowdAgg => Some(LabelMode::Agg),
            Gate::CrowdMajor => Some(LabelMode::Major),
            Gate::CrowdMinor => Some(LabelMode::Minor),
        }
    }
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Gate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Gate::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown gate `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Predicted,
    Crowd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub doc_id: String,
    pub sent_index: usize,
    pub pico_type: PicoType,
    pub selected: Vec<Span>,
    pub sentence_positive: bool,
    pub sentence_label_source: LabelSource,
}

/// Runs the gate and, if it passes, masked-span scoring and top-K selection.
///
/// The scoring details are returned alongside when scoring happened.
pub fn detect_spans_scored(
    sentence: &SentenceRecord,
    scorer: &dyn SentenceScorer,
    pico: PicoType,
    config: &SpanConfig,
    gate: Gate,
) -> Result<(DetectionResult, Option<SpanScoring>)> {
    if let Some(bound) = scorer.pico_type() {
        if bound != pico {
            return Err(Error::Config(format!("scorer is bound to {bound}, not {pico}")));
        }
    }
    let tokens = sentence.token_texts();
    let (positive, base, source) = match gate.label_mode() {
        None => {
            let base = score_sentence(scorer, &tokens, None)?;
            (base.probability >= config.threshold, Some(base), LabelSource::Predicted)
        }
        Some(mode) => (
            derive_sentence_label(sentence, pico, mode, None)?,
            None,
            LabelSource::Crowd,
        ),
    };

    let mut result = DetectionResult {
        doc_id: sentence.doc_id.clone(),
        sent_index: sentence.sent_index,
        pico_type: pico,
        selected: Vec::new(),
        sentence_positive: positive,
        sentence_label_source: source,
    };
    if !positive {
        return Ok((result, None));
    }
    let scoring = score_candidates_from(scorer, &tokens, config.max_span_len.get(pico), config, base)?;
    result.selected = top_k_select(&scoring.scored, config.top_k.get(pico));
    Ok((result, Some(scoring)))
}

pub fn detect_spans(
    sentence: &SentenceRecord,
    scorer: &dyn SentenceScorer,
    pico: PicoType,
    config: &SpanConfig,
    gate: Gate,
) -> Result<DetectionResult> {
    detect_spans_scored(sentence, scorer, pico, config, gate).map(|(r, _)| r)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;
    use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

    use super::*;
    use crate::corpus::{SpanSet, Token};
    use crate::engine::PerType;
    use crate::scorer::{BaselineScorerModel, ScoreRequest, ScoreResult};

    fn scored(spans: &[((usize, usize), f64)]) -> Vec<ScoredSpan> {
        spans
            .iter()
            .map(|&((s, e), c)| ScoredSpan::new(Span::new(s, e), c, 0.0))
            .collect()
    }

    fn example_set() -> Vec<ScoredSpan> {
        scored(&[((2, 5), 0.9), ((0, 2), 0.7), ((4, 6), 0.5), ((6, 7), 0.3)])
    }

    #[test]
    fn selection_examples() {
        assert_eq!(top_k_select(&example_set(), 2), [Span::new(2, 5), Span::new(0, 2)]);
        assert_eq!(
            top_k_select(&example_set(), 3),
            [Span::new(2, 5), Span::new(0, 2), Span::new(6, 7)]
        );
        assert!(top_k_select(&scored(&[((0, 1), 0.0), ((1, 2), -0.3)]), 2).is_empty());
        assert!(top_k_select(&[], 2).is_empty());
    }

    #[test]
    fn ties_prefer_earlier_then_shorter() {
        let c = scored(&[((3, 5), 1.0), ((1, 4), 1.0), ((1, 2), 1.0)]);
        assert_eq!(top_k_select(&c, 1), [Span::new(1, 2)]);
        assert_eq!(top_k_select(&c, 3), [Span::new(1, 2), Span::new(3, 5)]);
    }

    /// Baseline scorer that counts masked requests.
    struct Counting {
        inner: BaselineScorerModel,
        masked: AtomicUsize,
    }

    impl SentenceScorer for Counting {
        fn pico_type(&self) -> Option<PicoType> {
            self.inner.pico_type()
        }

        fn score_batch(&self, requests: &[ScoreRequest<'_>]) -> Result<Vec<ScoreResult>> {
            let masked = requests.iter().filter(|r| r.mask.is_some()).count();
            self.masked.fetch_add(masked, AtomicOrdering::SeqCst);
            self.inner.score_batch(requests)
        }
    }

    fn sentence(words: &str, marks: &[bool]) -> SentenceRecord {
        let tokens = words
            .split_whitespace()
            .enumerate()
            .map(|(k, w)| Token {
                text: w.into(),
                char_start: 10 * k,
                char_end: 10 * k + w.len(),
            })
            .collect();
        let annotators = marks
            .iter()
            .enumerate()
            .map(|(k, &m)| {
                let spans: SpanSet = if m { [Span::new(0, 1)].into() } else { SpanSet::new() };
                (format!("a{k}"), spans)
            })
            .collect();
        SentenceRecord {
            doc_id: "d".into(),
            tokens,
            crowd: BTreeMap::from([(PicoType::Population, annotators)]),
            ..Default::default()
        }
    }

    fn keyword_scorer(keywords: &[&str], bias: f64) -> Counting {
        let mut m = BaselineScorerModel::zeros(PicoType::Population, 1 << 16, 1);
        for w in keywords {
            for (k, _) in m.featurize(&[*w], None).0 {
                m.pos_weights[k as usize] = 1.5;
            }
        }
        m.pos_bias = bias;
        Counting { inner: m, masked: AtomicUsize::new(0) }
    }

    #[test]
    fn closed_gate_scores_nothing() {
        let scorer = keyword_scorer(&["asthma"], -10.0);
        let s = sentence("adults with asthma", &[true, false, false]);
        let r = detect_spans(&s, &scorer, PicoType::Population, &SpanConfig::default(), Gate::CrowdMajor).unwrap();
        assert!(!r.sentence_positive && r.selected.is_empty());
        assert_eq!(r.sentence_label_source, LabelSource::Crowd);

        let r = detect_spans(&s, &scorer, PicoType::Population, &SpanConfig::default(), Gate::Predicted).unwrap();
        assert!(!r.sentence_positive && r.selected.is_empty());
        assert_eq!(scorer.masked.load(AtomicOrdering::SeqCst), 0);
    }

    #[test]
    fn open_gate_finds_keyword() {
        let scorer = keyword_scorer(&["asthma"], 0.0);
        let s = sentence("adults with asthma were enrolled", &[true]);
        let r = detect_spans(&s, &scorer, PicoType::Population, &SpanConfig::default(), Gate::CrowdMinor).unwrap();
        assert!(r.sentence_positive);
        assert!(r.selected.iter().any(|sp| sp.indices().contains(&2)));
        assert!(scorer.masked.load(AtomicOrdering::SeqCst) > 0);
    }

    #[test]
    fn k_caps_selection() {
        let scorer = keyword_scorer(&["x", "y", "z"], 0.0);
        let s = sentence("x a y b z", &[true]);
        // single tokens only, so the three keywords are three disjoint candidates
        let config = SpanConfig {
            top_k: PerType::uniform(2),
            max_span_len: PerType::uniform(1),
            ..SpanConfig::default()
        };
        let r = detect_spans(&s, &scorer, PicoType::Population, &config, Gate::Predicted).unwrap();
        assert_eq!(r.selected.len(), 2);
    }

    #[test]
    fn scorer_type_mismatch_is_rejected() {
        let scorer = keyword_scorer(&["x"], 0.0);
        let s = sentence("x", &[true]);
        assert!(detect_spans(&s, &scorer, PicoType::Outcome, &SpanConfig::default(), Gate::Predicted).is_err());
    }

    #[test]
    fn gate_names_round_trip() {
        for g in Gate::ALL {
            assert_eq!(g.as_str().parse::<Gate>().unwrap(), g);
        }
        assert!("crowd".parse::<Gate>().is_err());
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        fn candidates() -> impl Strategy<Value = Vec<ScoredSpan>> {
            proptest::collection::vec((0usize..20, 1usize..6, -1.0f64..1.0), 0..40).prop_map(|v| {
                v.into_iter()
                    .map(|(s, l, c)| ScoredSpan::new(Span::new(s, s + l), c, 0.0))
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn selections_do_not_overlap(c in candidates(), k in 1usize..6) {
                let sel = top_k_select(&c, k);
                prop_assert!(sel.len() <= k);
                for (i, a) in sel.iter().enumerate() {
                    for b in &sel[i + 1..] {
                        prop_assert!(!a.overlaps(b));
                    }
                }
            }

            #[test]
            fn selection_at_k_prefixes_k_plus_one(c in candidates(), k in 1usize..6) {
                let a = top_k_select(&c, k);
                let b = top_k_select(&c, k + 1);
                prop_assert_eq!(&b[..a.len()], &a[..]);
            }

            #[test]
            fn positive_scaling_is_invariant(c in candidates(), k in 1usize..6, exp in -6i32..7) {
                // powers of two scale exactly, so no ties are created by rounding
                let scale = 2f64.powi(exp);
                let scaled: Vec<ScoredSpan> = c
                    .iter()
                    .map(|s| ScoredSpan { contribution: s.contribution * scale, ..*s })
                    .collect();
                let mut a = top_k_select(&c, k);
                let mut b = top_k_select(&scaled, k);
                a.sort();
                b.sort();
                prop_assert_eq!(a, b);
            }
        }
    }
}
