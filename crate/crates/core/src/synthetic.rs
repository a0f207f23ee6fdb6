//! Deterministic synthetic corpus with planted keyword phrases.
//!
//! Positive sentences carry one 2–4 token phrase from a fixed list, placed
//! among filler words that never occur inside a phrase. Simulated crowd
//! workers mark the phrase (sometimes with a one-token boundary slip) or, on
//! negative sentences, occasionally mark a random filler span. Expert spans
//! are the planted phrases.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, PicoType, SentenceRecord, Span, SpanSet, Split, Token};
use crate::error::Result;

pub const PHRASES: &[&[&str]] = &[
    &["patients", "with", "diabetes"],
    &["adults", "with", "asthma"],
    &["children", "with", "epilepsy"],
    &["pregnant", "women"],
    &["elderly", "women"],
    &["smokers", "aged", "over", "40"],
    &["obese", "adolescents"],
    &["patients", "with", "chronic", "pain"],
    &["healthy", "volunteers"],
    &["infants", "born", "preterm"],
];

pub const FILLER: &[&str] = &[
    "the", "study", "was", "conducted", "at", "three", "centres", "and", "results", "were",
    "analysed", "using", "standard", "methods", "a", "total", "of", "participants", "received",
    "treatment", "for", "twelve", "weeks", "outcomes", "measured", "baseline", "follow", "up",
    "randomised", "trial", "in", "this", "we", "report", "primary", "endpoint", "secondary",
    "data", "collected", "by", "trained", "staff", "during", "visits", "enrolled", "recruited",
    "from", "clinics", "hospital", "groups", "compared", "placebo", "dose", "daily", "assessed",
    "after", "months", "significant", "differences", "observed",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub sentences: usize,
    pub sentences_per_doc: usize,
    pub positive_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub annotators: usize,
    /// Chance that one worker marks the planted phrase.
    pub hit_rate: f64,
    /// Chance that a marking worker shifts one boundary by a token.
    pub boundary_slip: f64,
    /// Chance that one worker marks a filler span in a negative sentence.
    pub false_mark_rate: f64,
    pub pico: PicoType,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            sentences: 500,
            sentences_per_doc: 10,
            positive_rate: 0.5,
            min_len: 8,
            max_len: 20,
            annotators: 3,
            hit_rate: 0.6,
            boundary_slip: 0.2,
            false_mark_rate: 0.05,
            pico: PicoType::Population,
            seed: 42,
        }
    }
}

fn random_span(rng: &mut ChaCha8Rng, n: usize, max_len: usize) -> Span {
    let len = rng.gen_range(1..=max_len.min(n));
    let start = rng.gen_range(0..=n - len);
    Span::new(start, start + len)
}

fn slip(rng: &mut ChaCha8Rng, span: Span, n: usize) -> Span {
    let mut s = span;
    match rng.gen_range(0..4) {
        0 if s.start > 0 => s.start -= 1,
        1 if s.len() > 1 => s.start += 1,
        2 if s.end < n => s.end += 1,
        _ if s.len() > 1 => s.end -= 1,
        _ => {}
    }
    s
}

pub fn generate(config: &SyntheticConfig, split: Split) -> Result<Corpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pico = config.pico;
    let per_doc = config.sentences_per_doc.max(1);
    let mut sentences = Vec::with_capacity(config.sentences);

    for k in 0..config.sentences {
        let doc = k / per_doc;
        let doc_id = format!("syn-{:04}", doc);
        let positive = rng.gen_bool(config.positive_rate);
        let len = rng.gen_range(config.min_len..=config.max_len);

        let mut words: Vec<&str> = (0..len).map(|_| *FILLER.choose(&mut rng).unwrap()).collect();
        let mut planted = None;
        if positive {
            let phrase = *PHRASES.choose(&mut rng).unwrap();
            let at = rng.gen_range(0..=words.len());
            for (j, w) in phrase.iter().enumerate() {
                words.insert(at + j, w);
            }
            planted = Some(Span::new(at, at + phrase.len()));
        }
        let n = words.len();

        let mut annotators = BTreeMap::new();
        let mut marks = 0;
        for a in 0..config.annotators {
            let id = format!("w{}-{}", doc % 7, a);
            let mut spans = SpanSet::new();
            match planted {
                Some(span) if rng.gen_bool(config.hit_rate) => {
                    let marked = if rng.gen_bool(config.boundary_slip) { slip(&mut rng, span, n) } else { span };
                    spans.insert(marked);
                    marks += 1;
                }
                None if rng.gen_bool(config.false_mark_rate) => {
                    spans.insert(random_span(&mut rng, n, 3));
                }
                _ => {}
            }
            annotators.insert(id, spans);
        }

        let mut tokens = Vec::with_capacity(n);
        let mut cursor = 0;
        for w in &words {
            let len = w.chars().count();
            tokens.push(Token {
                text: w.to_string(),
                char_start: cursor,
                char_end: cursor + len,
            });
            cursor += len + 1;
        }
        let expert: SpanSet = planted.into_iter().collect();
        // stand-in for an external aggregator: the phrase when most workers found it
        let aggregated: SpanSet = planted.filter(|_| 2 * marks > config.annotators).into_iter().collect();
        sentences.push(SentenceRecord {
            doc_id,
            sent_index: k % per_doc,
            tokens,
            crowd: BTreeMap::from([(pico, annotators)]),
            expert: BTreeMap::from([(pico, expert)]),
            aggregated: BTreeMap::from([(pico, aggregated)]),
        });
    }
    Corpus::new(split, sentences)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{corpus_to_string, parse_corpus};
    use crate::labels::{derive_sentence_label, LabelMode};

    #[test]
    fn deterministic_and_valid() {
        let config = SyntheticConfig { sentences: 60, ..Default::default() };
        let a = generate(&config, Split::Train).unwrap();
        let b = generate(&config, Split::Train).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 60);
        let text = corpus_to_string(&a).unwrap();
        let back = parse_corpus(&text, std::path::Path::new("syn"), Split::Train).unwrap();
        assert_eq!(back.sentences, a.sentences);
    }

    #[test]
    fn phrases_and_filler_are_disjoint() {
        for p in PHRASES {
            assert!((2..=4).contains(&p.len()));
            for w in *p {
                assert!(!FILLER.contains(w), "{w}");
            }
        }
    }

    #[test]
    fn planted_phrase_matches_expert_span() {
        let c = generate(&SyntheticConfig { sentences: 100, ..Default::default() }, Split::Test).unwrap();
        let mut positives = 0;
        for s in &c.sentences {
            let gold = s.expert_spans(PicoType::Population).unwrap();
            if let Some(span) = gold.iter().next() {
                positives += 1;
                let words: Vec<&str> = s.tokens[span.indices()].iter().map(|t| t.text.as_str()).collect();
                assert!(PHRASES.contains(&words.as_slice()), "{words:?}");
            }
        }
        assert!(positives > 30 && positives < 70, "{positives}");
    }

    #[test]
    fn minor_labels_cover_more_than_major() {
        let c = generate(&SyntheticConfig::default(), Split::Train).unwrap();
        let count = |mode| {
            c.sentences
                .iter()
                .filter(|s| derive_sentence_label(s, PicoType::Population, mode, None).unwrap())
                .count()
        };
        assert!(count(LabelMode::Minor) > count(LabelMode::Major));
        // two false marks on one negative sentence make it major but not agg
        assert!(count(LabelMode::Agg) <= count(LabelMode::Major));
    }
}
