//! Corpus types and the JSON-lines corpus format.
//!
//! One document per line:
//!
//! ```json
//! {"doc_id": "d1", "text": "...", "sentences": [
//!   {"tokens": ["..."], "offsets": [[0, 3]],
//!    "crowd": {"population": {"a1": [[0, 2]]}},
//!    "expert": {"population": [[0, 2]]},
//!    "aggregated": {"population": [[0, 2]]}}]}
//! ```
//!
//! `offsets`, `expert`, `aggregated` and `text` are optional. A document
//! with `text` and no `sentences` is split and tokenized with the rules in
//! [`crate::tokenize`]. Annotation layers are completed per document: an
//! annotator (or expert/aggregated layer) present in one sentence of a
//! document for a type is treated as having annotated every sentence of that
//! document for that type.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tokenize::{split_sentences, tokenize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
}

/// Half-open token interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start < end, "empty span [{start}, {end})");
        Span { start, end }
    }

    /// Builds a span and checks it against a sentence of `n` tokens.
    pub fn checked(start: usize, end: usize, n: usize) -> Result<Self> {
        let span = Span { start, end };
        span.validate(n)?;
        Ok(span)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.start < self.end && self.end <= n {
            Ok(())
        } else {
            Err(Error::InvalidSpan { span: *self, len: n })
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn overlap_len(&self, other: &Span) -> usize {
        self.end.min(other.end).saturating_sub(self.start.max(other.start))
    }

    pub fn contains(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

impl Serialize for Span {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        (self.start, self.end).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Span {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let (start, end) = <(usize, usize)>::deserialize(d)?;
        Ok(Span { start, end })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PicoType {
    Population,
    Intervention,
    Outcome,
}

impl PicoType {
    pub const ALL: [PicoType; 3] = [
        PicoType::Population,
        PicoType::Intervention,
        PicoType::Outcome,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PicoType::Population => "population",
            PicoType::Intervention => "intervention",
            PicoType::Outcome => "outcome",
        }
    }
}

impl fmt::Display for PicoType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PicoType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "population" | "p" => Ok(PicoType::Population),
            "intervention" | "i" => Ok(PicoType::Intervention),
            "outcome" | "o" => Ok(PicoType::Outcome),
            other => Err(Error::Config(format!("unknown PICO type `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Dev,
    Test,
}

pub type SpanSet = BTreeSet<Span>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SentenceRecord {
    pub doc_id: String,
    pub sent_index: usize,
    pub tokens: Vec<Token>,
    /// Per type, annotator id to the spans that annotator marked here.
    pub crowd: BTreeMap<PicoType, BTreeMap<String, SpanSet>>,
    /// Expert spans; a type is absent when no expert annotated this document for it.
    pub expert: BTreeMap<PicoType, SpanSet>,
    /// Externally aggregated crowd layer (e.g. a published HMMCrowd output).
    pub aggregated: BTreeMap<PicoType, SpanSet>,
}

impl SentenceRecord {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_texts(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.text.clone()).collect()
    }

    pub fn annotators(&self, pico: PicoType) -> Option<&BTreeMap<String, SpanSet>> {
        self.crowd.get(&pico)
    }

    pub fn expert_spans(&self, pico: PicoType) -> Option<&SpanSet> {
        self.expert.get(&pico)
    }

    pub fn aggregated_spans(&self, pico: PicoType) -> Option<&SpanSet> {
        self.aggregated.get(&pico)
    }

    fn all_spans(&self) -> impl Iterator<Item = &Span> {
        self.crowd
            .values()
            .flat_map(|m| m.values().flatten())
            .chain(self.expert.values().flatten())
            .chain(self.aggregated.values().flatten())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub split: Split,
    pub sentences: Vec<SentenceRecord>,
    pub annotator_roster: BTreeSet<String>,
    /// Raw document text, kept for re-serialization.
    pub texts: BTreeMap<String, String>,
}

impl Corpus {
    /// Validates sentences and builds a corpus. Sentences of one document
    /// must be contiguous.
    pub fn new(split: Split, sentences: Vec<SentenceRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut roster = BTreeSet::new();
        for s in &sentences {
            if !seen.insert((s.doc_id.clone(), s.sent_index)) {
                return Err(invariant(
                    &s.doc_id,
                    "sent_index",
                    format!("duplicate sentence {}", s.sent_index),
                ));
            }
            validate_sentence(s)?;
            for annotators in s.crowd.values() {
                roster.extend(annotators.keys().cloned());
            }
        }
        Ok(Corpus {
            split,
            sentences,
            annotator_roster: roster,
            texts: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn get(&self, doc_id: &str, sent_index: usize) -> Option<&SentenceRecord> {
        self.sentences
            .iter()
            .find(|s| s.doc_id == doc_id && s.sent_index == sent_index)
    }
}

fn invariant(doc_id: &str, field: &str, message: impl Into<String>) -> Error {
    Error::Invariant {
        doc_id: doc_id.to_string(),
        field: field.to_string(),
        message: message.into(),
    }
}

fn validate_sentence(s: &SentenceRecord) -> Result<()> {
    let field = |name: &str| format!("sentences[{}].{name}", s.sent_index);
    if s.tokens.is_empty() {
        return Err(invariant(&s.doc_id, &field("tokens"), "sentence has no tokens"));
    }
    let mut prev_end = 0;
    for (k, t) in s.tokens.iter().enumerate() {
        if t.text.is_empty() {
            return Err(invariant(&s.doc_id, &field("tokens"), format!("token {k} is empty")));
        }
        if t.char_start >= t.char_end || (k > 0 && t.char_start < prev_end) {
            return Err(invariant(
                &s.doc_id,
                &field("offsets"),
                format!("token {k} has offsets ({}, {})", t.char_start, t.char_end),
            ));
        }
        prev_end = t.char_end;
    }
    for span in s.all_spans() {
        if span.validate(s.len()).is_err() {
            return Err(invariant(
                &s.doc_id,
                &field("spans"),
                format!("span {span} outside sentence of {} tokens", s.len()),
            ));
        }
    }
    Ok(())
}

type RawSpans = Vec<Span>;

#[derive(Debug, Serialize, Deserialize)]
struct RawDocument {
    doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default)]
    sentences: Option<Vec<RawSentence>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSentence {
    tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    offsets: Option<Vec<(usize, usize)>>,
    #[serde(default)]
    crowd: BTreeMap<String, BTreeMap<String, RawSpans>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    expert: Option<BTreeMap<String, RawSpans>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aggregated: Option<BTreeMap<String, RawSpans>>,
}

fn parse_pico(doc_id: &str, field: &str, key: &str) -> Result<PicoType> {
    key.parse()
        .map_err(|_| invariant(doc_id, field, format!("unknown PICO type `{key}`")))
}

fn spans_of(doc_id: &str, field: &str, raw: RawSpans) -> Result<SpanSet> {
    let mut set = SpanSet::new();
    for span in raw {
        if span.start >= span.end {
            return Err(invariant(doc_id, field, format!("empty span {span}")));
        }
        set.insert(span);
    }
    Ok(set)
}

fn document_to_sentences(raw: RawDocument) -> Result<(Vec<SentenceRecord>, Option<String>)> {
    let doc_id = raw.doc_id;
    let raw_sentences = match (raw.sentences, &raw.text) {
        (Some(s), _) => s,
        (None, Some(text)) => return Ok((sentences_from_text(&doc_id, text), raw.text)),
        (None, None) => {
            return Err(invariant(&doc_id, "sentences", "document has neither sentences nor text"))
        }
    };

    // Offsets default to a virtual text where all tokens are joined by single spaces.
    let mut cursor = 0;
    let mut out = Vec::with_capacity(raw_sentences.len());
    for (sent_index, rs) in raw_sentences.into_iter().enumerate() {
        let field = |name: &str| format!("sentences[{sent_index}].{name}");
        let offsets = match rs.offsets {
            Some(o) if o.len() != rs.tokens.len() => {
                return Err(invariant(
                    &doc_id,
                    &field("offsets"),
                    format!("{} offsets for {} tokens", o.len(), rs.tokens.len()),
                ))
            }
            Some(o) => o,
            None => rs
                .tokens
                .iter()
                .map(|t| {
                    let start = cursor;
                    cursor += t.chars().count() + 1;
                    (start, start + t.chars().count())
                })
                .collect(),
        };
        let tokens = rs
            .tokens
            .into_iter()
            .zip(offsets)
            .map(|(text, (char_start, char_end))| Token {
                text,
                char_start,
                char_end,
            })
            .collect();

        let mut crowd = BTreeMap::new();
        for (pico, annotators) in rs.crowd {
            let pico = parse_pico(&doc_id, &field("crowd"), &pico)?;
            let mut by_annotator = BTreeMap::new();
            for (annotator, spans) in annotators {
                by_annotator.insert(annotator, spans_of(&doc_id, &field("crowd"), spans)?);
            }
            crowd.insert(pico, by_annotator);
        }
        let layer = |raw: Option<BTreeMap<String, RawSpans>>, name: &str| -> Result<_> {
            let mut map = BTreeMap::new();
            for (pico, spans) in raw.unwrap_or_default() {
                let pico = parse_pico(&doc_id, &field(name), &pico)?;
                map.insert(pico, spans_of(&doc_id, &field(name), spans)?);
            }
            Ok(map)
        };
        out.push(SentenceRecord {
            doc_id: doc_id.clone(),
            sent_index,
            tokens,
            crowd,
            expert: layer(rs.expert, "expert")?,
            aggregated: layer(rs.aggregated, "aggregated")?,
        });
    }
    complete_layers(&mut out);
    Ok((out, raw.text))
}

fn sentences_from_text(doc_id: &str, text: &str) -> Vec<SentenceRecord> {
    let tokens = tokenize(text);
    split_sentences(text)
        .into_iter()
        .map(|(start, end)| {
            tokens
                .iter()
                .filter(|t| t.char_start >= start && t.char_end <= end)
                .cloned()
                .collect::<Vec<_>>()
        })
        .filter(|toks| !toks.is_empty())
        .enumerate()
        .map(|(sent_index, tokens)| SentenceRecord {
            doc_id: doc_id.to_string(),
            sent_index,
            tokens,
            ..Default::default()
        })
        .collect()
}

/// Spreads document-level annotator sets and expert/aggregated layers to
/// every sentence of the document.
fn complete_layers(sentences: &mut [SentenceRecord]) {
    let mut crowd: BTreeMap<PicoType, BTreeSet<String>> = BTreeMap::new();
    let mut expert = BTreeSet::new();
    let mut aggregated = BTreeSet::new();
    for s in sentences.iter() {
        for (pico, annotators) in &s.crowd {
            crowd.entry(*pico).or_default().extend(annotators.keys().cloned());
        }
        expert.extend(s.expert.keys().copied());
        aggregated.extend(s.aggregated.keys().copied());
    }
    for s in sentences.iter_mut() {
        for (pico, annotators) in &crowd {
            let entry = s.crowd.entry(*pico).or_default();
            for a in annotators {
                entry.entry(a.clone()).or_default();
            }
        }
        for pico in &expert {
            s.expert.entry(*pico).or_default();
        }
        for pico in &aggregated {
            s.aggregated.entry(*pico).or_default();
        }
    }
}

/// Parses a corpus from JSON-lines text. `origin` is used in error messages.
pub fn parse_corpus(content: &str, origin: &Path, split: Split) -> Result<Corpus> {
    let mut sentences = Vec::new();
    let mut texts = BTreeMap::new();
    for (k, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDocument = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: k + 1,
            message: e.to_string(),
        })?;
        let doc_id = raw.doc_id.clone();
        let (doc_sentences, text) = document_to_sentences(raw)?;
        if let Some(text) = text {
            texts.insert(doc_id, text);
        }
        sentences.extend(doc_sentences);
    }
    let mut corpus = Corpus::new(split, sentences)?;
    corpus.texts = texts;
    Ok(corpus)
}

pub fn load_corpus(path: impl AsRef<Path>, split: Split) -> Result<Corpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut content = String::new();
    for line in BufReader::new(file).lines() {
        content.push_str(&line.map_err(|e| Error::io(path, e))?);
        content.push('\n');
    }
    parse_corpus(&content, path, split)
}

/// Serializes a corpus in canonical form: one line per document, sentences
/// in order, offsets always present, map keys sorted, spans sorted.
pub fn corpus_to_string(corpus: &Corpus) -> Result<String> {
    let mut out = String::new();
    let mut k = 0;
    while k < corpus.sentences.len() {
        let doc_id = &corpus.sentences[k].doc_id;
        let mut end = k;
        while end < corpus.sentences.len() && &corpus.sentences[end].doc_id == doc_id {
            end += 1;
        }
        let doc = RawDocument {
            doc_id: doc_id.clone(),
            text: corpus.texts.get(doc_id).cloned(),
            sentences: Some(corpus.sentences[k..end].iter().map(raw_sentence).collect()),
        };
        out.push_str(&serde_json::to_string(&doc)?);
        out.push('\n');
        k = end;
    }
    Ok(out)
}

fn raw_sentence(s: &SentenceRecord) -> RawSentence {
    let layer = |m: &BTreeMap<PicoType, SpanSet>| {
        (!m.is_empty()).then(|| {
            m.iter()
                .map(|(p, spans)| (p.as_str().to_string(), spans.iter().copied().collect()))
                .collect()
        })
    };
    RawSentence {
        tokens: s.token_texts(),
        offsets: Some(s.tokens.iter().map(|t| (t.char_start, t.char_end)).collect()),
        crowd: s
            .crowd
            .iter()
            .map(|(p, annotators)| {
                let inner = annotators
                    .iter()
                    .map(|(a, spans)| (a.clone(), spans.iter().copied().collect()))
                    .collect();
                (p.as_str().to_string(), inner)
            })
            .collect(),
        expert: layer(&s.expert),
        aggregated: layer(&s.aggregated),
    }
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let content = corpus_to_string(corpus)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(content.as_bytes())
        .map_err(|e| Error::io(path, e))
}
