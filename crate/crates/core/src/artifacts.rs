//! JSON-lines output records.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::{PicoType, Span};
use crate::engine::SpanScoring;
use crate::error::{Error, Result};
use crate::inference::{DetectionResult, Gate};
use crate::labels::LabelMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub doc_id: String,
    pub sent_index: usize,
    pub pico: PicoType,
    pub mode: LabelMode,
    pub label: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub doc_id: String,
    pub sent_index: usize,
    pub pico: PicoType,
    pub spans: Vec<Span>,
    pub gate: Gate,
    pub positive: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl PredictionRecord {
    pub fn from_detection(d: &DetectionResult, gate: Gate, config_hash: Option<String>) -> Self {
        PredictionRecord {
            doc_id: d.doc_id.clone(),
            sent_index: d.sent_index,
            pico: d.pico_type,
            spans: d.selected.clone(),
            gate,
            positive: d.sentence_positive,
            config_hash,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpSpan {
    pub start: usize,
    pub end: usize,
    pub contribution: f64,
}

/// Scored candidates of one sentence, for audit and reduction reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDumpRecord {
    pub doc_id: String,
    pub sent_index: usize,
    pub pico: PicoType,
    pub base_score: f64,
    pub total_candidates: usize,
    pub eliminated: usize,
    pub spans: Vec<DumpSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl ScoredDumpRecord {
    pub fn from_scoring(
        doc_id: &str,
        sent_index: usize,
        pico: PicoType,
        scoring: &SpanScoring,
        config_hash: Option<String>,
    ) -> Self {
        ScoredDumpRecord {
            doc_id: doc_id.to_string(),
            sent_index,
            pico,
            base_score: scoring.base_value,
            total_candidates: scoring.total_candidates,
            eliminated: scoring.elimination.len(),
            spans: scoring
                .scored
                .iter()
                .map(|s| DumpSpan {
                    start: s.span.start,
                    end: s.span.end,
                    contribution: s.contribution,
                })
                .collect(),
            config_hash,
        }
    }
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let content = to_jsonl(records)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(content.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: k + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
