//! Corpus-level drivers over the per-sentence operations.

use rayon::prelude::*;

use crate::artifacts::{LabelRecord, PredictionRecord, ScoredDumpRecord};
use crate::corpus::{Corpus, PicoType};
use crate::engine::SpanConfig;
use crate::error::Result;
use crate::inference::{detect_spans_scored, Gate};
use crate::labels::{derive_sentence_label, LabelMode};
use crate::scorer::SentenceScorer;

pub fn weak_labels(
    corpus: &Corpus,
    pico: PicoType,
    modes: &[LabelMode],
    config_hash: Option<&str>,
) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::with_capacity(corpus.len() * modes.len());
    for s in &corpus.sentences {
        for &mode in modes {
            out.push(LabelRecord {
                doc_id: s.doc_id.clone(),
                sent_index: s.sent_index,
                pico,
                mode,
                label: derive_sentence_label(s, pico, mode, None)?,
                config_hash: config_hash.map(str::to_string),
            });
        }
    }
    Ok(out)
}

/// `(tokens, label)` training pairs from crowd-derived sentence labels.
pub fn labeled_sentences(corpus: &Corpus, pico: PicoType, mode: LabelMode) -> Result<Vec<(Vec<String>, bool)>> {
    corpus
        .sentences
        .iter()
        .map(|s| Ok((s.token_texts(), derive_sentence_label(s, pico, mode, None)?)))
        .collect()
}

pub struct Detections {
    pub predictions: Vec<PredictionRecord>,
    pub dumps: Vec<ScoredDumpRecord>,
}

/// Runs detection over every sentence, in parallel across sentences.
/// Output order follows the corpus.
pub fn detect_corpus(
    corpus: &Corpus,
    scorer: &dyn SentenceScorer,
    pico: PicoType,
    config: &SpanConfig,
    gate: Gate,
    config_hash: Option<&str>,
) -> Result<Detections> {
    config.validate()?;
    let results: Vec<_> = corpus
        .sentences
        .par_iter()
        .map(|s| detect_spans_scored(s, scorer, pico, config, gate))
        .collect::<Result<_>>()?;

    let hash = config_hash.map(str::to_string);
    let mut predictions = Vec::with_capacity(results.len());
    let mut dumps = Vec::new();
    for (detection, scoring) in results {
        if let Some(scoring) = &scoring {
            dumps.push(ScoredDumpRecord::from_scoring(
                &detection.doc_id,
                detection.sent_index,
                pico,
                scoring,
                hash.clone(),
            ));
        }
        predictions.push(PredictionRecord::from_detection(&detection, gate, hash.clone()));
    }
    Ok(Detections { predictions, dumps })
}
