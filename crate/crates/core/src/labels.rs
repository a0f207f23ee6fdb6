//! Sentence-level weak labels derived from crowd span annotations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{PicoType, SentenceRecord, SpanSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Any span in the externally aggregated layer.
    Agg,
    /// Strictly more than half of the document's annotators marked a span.
    Major,
    /// At least one annotator marked a span.
    Minor,
}

impl LabelMode {
    pub const ALL: [LabelMode; 3] = [LabelMode::Agg, LabelMode::Major, LabelMode::Minor];

    pub fn as_str(self) -> &'static str {
        match self {
            LabelMode::Agg => "agg",
            LabelMode::Major => "major",
            LabelMode::Minor => "minor",
        }
    }
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agg" => Ok(LabelMode::Agg),
            "major" => Ok(LabelMode::Major),
            "minor" => Ok(LabelMode::Minor),
            other => Err(Error::Config(format!("unknown label mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceLabel {
    pub pico_type: PicoType,
    pub mode: LabelMode,
    pub value: bool,
}

/// Computes the sentence label for one type and mode.
///
/// `aggregated` overrides the sentence's own aggregated layer; `Agg` fails
/// with a configuration error when neither is available.
pub fn derive_sentence_label(
    sentence: &SentenceRecord,
    pico: PicoType,
    mode: LabelMode,
    aggregated: Option<&SpanSet>,
) -> Result<bool> {
    match mode {
        LabelMode::Agg => {
            let spans = aggregated
                .or_else(|| sentence.aggregated_spans(pico))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "agg labels need an aggregated layer ({} sentence {}, {pico})",
                        sentence.doc_id, sentence.sent_index
                    ))
                })?;
            // Any span that survived validation covers at least one token of the sentence.
            Ok(spans.iter().any(|s| s.end <= sentence.len() && !s.is_empty()))
        }
        LabelMode::Minor | LabelMode::Major => {
            let Some(annotators) = sentence.annotators(pico) else {
                return Ok(false);
            };
            let marking = annotators.values().filter(|spans| !spans.is_empty()).count();
            Ok(match mode {
                LabelMode::Minor => marking >= 1,
                _ => 2 * marking > annotators.len(),
            })
        }
    }
}

pub fn sentence_labels(sentence: &SentenceRecord, pico: PicoType) -> Result<Vec<SentenceLabel>> {
    LabelMode::ALL
        .iter()
        .filter(|m| **m != LabelMode::Agg || sentence.aggregated_spans(pico).is_some())
        .map(|&mode| {
            Ok(SentenceLabel {
                pico_type: pico,
                mode,
                value: derive_sentence_label(sentence, pico, mode, None)?,
            })
        })
        .collect()
}
