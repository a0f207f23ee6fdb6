//! Masked-span contribution scoring with nested-span elimination.
//!
//! Every candidate span of up to `M` tokens is masked and the sentence is
//! re-scored; the drop in score is the span's contribution. Single-token spans
//! with negative contribution seed an eliminated set, and a longer span is
//! eliminated (and never sent to the scorer) as soon as it splits into two
//! eliminated parts. Spans are processed in order of increasing length so
//! every split is decided before it is looked up.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{PicoType, Span};
use crate::error::{Error, Result};
use crate::scorer::{score_sentence, ScoreRequest, ScoreResult, SentenceScorer};

/// One value per PICO type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerType<T> {
    pub population: T,
    pub intervention: T,
    pub outcome: T,
}

impl<T: Copy> PerType<T> {
    pub fn get(&self, pico: PicoType) -> T {
        match pico {
            PicoType::Population => self.population,
            PicoType::Intervention => self.intervention,
            PicoType::Outcome => self.outcome,
        }
    }

    pub fn set(&mut self, pico: PicoType, value: T) {
        match pico {
            PicoType::Population => self.population = value,
            PicoType::Intervention => self.intervention = value,
            PicoType::Outcome => self.outcome = value,
        }
    }

    pub fn uniform(value: T) -> Self {
        PerType {
            population: value,
            intervention: value,
            outcome: value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Contributions from the pre-softmax positive-class score.
    #[default]
    Logit,
    /// Contributions from the positive-class probability.
    Probability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpanConfig {
    pub max_span_len: PerType<usize>,
    pub top_k: PerType<usize>,
    pub score_mode: ScoreMode,
    /// Masked variants sent to the scorer per call.
    pub batch_size: usize,
    /// Skip spans that split into two eliminated sub-spans.
    pub eliminate_nested: bool,
    /// Sentence classification threshold for the predicted gate.
    pub threshold: f64,
}

impl Default for SpanConfig {
    fn default() -> Self {
        SpanConfig {
            max_span_len: PerType {
                population: 20,
                intervention: 7,
                outcome: 10,
            },
            top_k: PerType::uniform(2),
            score_mode: ScoreMode::Logit,
            batch_size: 64,
            eliminate_nested: true,
            threshold: 0.5,
        }
    }
}

impl SpanConfig {
    pub fn validate(&self) -> Result<()> {
        for pico in PicoType::ALL {
            if self.max_span_len.get(pico) == 0 || self.top_k.get(pico) == 0 {
                return Err(Error::Config(format!("M and K must be at least 1 ({pico})")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

/// Number of spans of at most `m` tokens in a sentence of `n` tokens.
pub fn candidate_count(n: usize, m: usize) -> usize {
    if m <= n {
        m * (2 * n - m + 1) / 2
    } else {
        n * (n + 1) / 2
    }
}

/// All spans of at most `m` tokens, shortest first, then by start.
pub fn enumerate_candidates(n: usize, m: usize) -> Vec<Span> {
    let m = m.min(n);
    (1..=m)
        .flat_map(|len| (0..=n - len).map(move |start| Span::new(start, start + len)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EliminationSet {
    pub eliminated: BTreeSet<Span>,
    /// Single-token spans scored to seed the set.
    pub singleton_scored: usize,
}

impl EliminationSet {
    pub fn contains(&self, span: &Span) -> bool {
        self.eliminated.contains(span)
    }

    pub fn len(&self) -> usize {
        self.eliminated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eliminated.is_empty()
    }
}

/// Dense membership table indexed by `(length, start)`.
struct Eliminated {
    rows: Vec<Vec<bool>>,
}

impl Eliminated {
    fn new(n: usize, max_len: usize) -> Self {
        Eliminated {
            rows: (0..=max_len).map(|len| vec![false; n + 1 - len.min(n)]).collect(),
        }
    }

    fn contains(&self, start: usize, end: usize) -> bool {
        self.rows
            .get(end - start)
            .and_then(|row| row.get(start))
            .copied()
            .unwrap_or(false)
    }

    fn insert(&mut self, span: Span) {
        self.rows[span.len()][span.start] = true;
    }

    /// A span is eliminated when some split point yields two eliminated parts.
    fn splits(&self, span: Span) -> bool {
        (span.start + 1..span.end).any(|p| self.contains(span.start, p) && self.contains(p, span.end))
    }
}

/// Computes the eliminated set for a sentence of `n` tokens up to span
/// length `max_len`, given at least every single-token contribution.
pub fn eliminate_nested(contributions: &BTreeMap<Span, f64>, n: usize, max_len: usize) -> Result<EliminationSet> {
    let max_len = max_len.min(n);
    let mut table = Eliminated::new(n, max_len);
    let mut set = EliminationSet::default();
    for k in 0..n {
        let span = Span::new(k, k + 1);
        let c = contributions
            .get(&span)
            .ok_or_else(|| Error::Precondition(format!("missing contribution for singleton {span}")))?;
        set.singleton_scored += 1;
        if *c < 0.0 {
            table.insert(span);
            set.eliminated.insert(span);
        }
    }
    for len in 2..=max_len {
        for start in 0..=n - len {
            let span = Span::new(start, start + len);
            if table.splits(span) {
                table.insert(span);
                set.eliminated.insert(span);
            }
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSpan {
    pub span: Span,
    pub base_score: f64,
    pub masked_score: f64,
    pub contribution: f64,
}

impl ScoredSpan {
    pub fn new(span: Span, base_score: f64, masked_score: f64) -> Self {
        ScoredSpan {
            span,
            base_score,
            masked_score,
            contribution: base_score - masked_score,
        }
    }
}

/// Everything produced by scoring one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanScoring {
    /// Scored, non-eliminated spans in enumeration order.
    pub scored: Vec<ScoredSpan>,
    pub elimination: EliminationSet,
    pub base: ScoreResult,
    /// The unmasked score in the configured [`ScoreMode`].
    pub base_value: f64,
    /// Tokens actually enumerated over (the scorer's effective length).
    pub length: usize,
    pub total_candidates: usize,
    /// Masked scorer requests issued.
    pub mask_calls: usize,
}

fn score_value(result: &ScoreResult, mode: ScoreMode) -> f64 {
    match mode {
        ScoreMode::Logit => result.positive_score,
        ScoreMode::Probability => result.probability,
    }
}

fn score_masked(
    scorer: &dyn SentenceScorer,
    tokens: &[String],
    spans: &[Span],
    batch_size: usize,
) -> Result<Vec<ScoreResult>> {
    let mut out = Vec::with_capacity(spans.len());
    for chunk in spans.chunks(batch_size) {
        let requests: Vec<ScoreRequest<'_>> = chunk
            .iter()
            .map(|s| ScoreRequest {
                tokens,
                mask: Some(*s),
            })
            .collect();
        let results = scorer.score_batch(&requests)?;
        if results.len() != requests.len() {
            return Err(Error::Protocol(format!(
                "scorer answered {} of {} requests",
                results.len(),
                requests.len()
            )));
        }
        out.extend(results);
    }
    Ok(out)
}

/// Masks and scores every candidate span of `tokens` up to `max_len` tokens.
pub fn score_all_candidates(
    scorer: &dyn SentenceScorer,
    tokens: &[String],
    max_len: usize,
    config: &SpanConfig,
) -> Result<SpanScoring> {
    score_candidates_from(scorer, tokens, max_len, config, None)
}

/// Like [`score_all_candidates`], reusing an already computed unmasked score.
pub(crate) fn score_candidates_from(
    scorer: &dyn SentenceScorer,
    tokens: &[String],
    max_len: usize,
    config: &SpanConfig,
    base: Option<ScoreResult>,
) -> Result<SpanScoring> {
    if tokens.is_empty() {
        return Err(Error::Precondition("cannot score an empty sentence".into()));
    }
    if max_len == 0 || config.batch_size == 0 {
        return Err(Error::Config("max span length and batch size must be at least 1".into()));
    }
    let base = match base {
        Some(b) => b,
        None => score_sentence(scorer, tokens, None)?,
    };
    let n = base.effective_length.min(tokens.len());
    if n == 0 {
        return Err(Error::Protocol("scorer reported an effective length of 0".into()));
    }
    let m = max_len.min(n);
    let mode = config.score_mode;
    let base_value = score_value(&base, mode);

    let mut table = Eliminated::new(n, m);
    let mut elimination = EliminationSet::default();
    let mut scored = Vec::new();
    let mut mask_calls = 0;

    for len in 1..=m {
        let mut to_score = Vec::new();
        for start in 0..=n - len {
            let span = Span::new(start, start + len);
            if config.eliminate_nested && len >= 2 && table.splits(span) {
                table.insert(span);
                elimination.eliminated.insert(span);
            } else {
                to_score.push(span);
            }
        }
        let results = score_masked(scorer, tokens, &to_score, config.batch_size)?;
        mask_calls += to_score.len();
        for (span, result) in to_score.into_iter().zip(results) {
            let s = ScoredSpan::new(span, base_value, score_value(&result, mode));
            if len == 1 {
                elimination.singleton_scored += 1;
                if config.eliminate_nested && s.contribution < 0.0 {
                    table.insert(span);
                    elimination.eliminated.insert(span);
                    continue;
                }
            }
            scored.push(s);
        }
    }

    Ok(SpanScoring {
        scored,
        elimination,
        base,
        base_value,
        length: n,
        total_candidates: candidate_count(n, m),
        mask_calls,
    })
}
