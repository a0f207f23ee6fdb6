//! Corpus-level evaluation of prediction files against expert annotations.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::artifacts::{PredictionRecord, ScoredDumpRecord};
use crate::corpus::{Corpus, PicoType, Span};
use crate::error::{Error, Result};
use crate::eval::{
    classify_errors, reduction_stats, sentence_metrics, token_prf, ErrorCounts, ReductionStats,
    SentenceMetrics, TokenMetrics,
};
use crate::inference::Gate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeReport {
    pub pico: PicoType,
    pub gate: Option<Gate>,
    /// Sentences with expert annotations for this type.
    pub sentences: usize,
    /// Expert-annotated sentences with no prediction line; scored as empty predictions.
    pub missing_predictions: usize,
    pub token: TokenMetrics,
    pub sentence: SentenceMetrics,
    pub errors: ErrorCounts,
    pub reduction: Option<ReductionStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub types: Vec<TypeReport>,
}

/// Scores predictions for every type that has expert annotations in the corpus
/// and at least one prediction line.
pub fn evaluate(
    corpus: &Corpus,
    predictions: &[PredictionRecord],
    dumps: Option<&[ScoredDumpRecord]>,
) -> Result<EvalReport> {
    let mut by_key: HashMap<(PicoType, &str, usize), &PredictionRecord> = HashMap::new();
    let mut gates: BTreeMap<PicoType, BTreeSet<Gate>> = BTreeMap::new();
    let mut hashes = BTreeSet::new();
    let known: HashSet<(&str, usize)> = corpus
        .sentences
        .iter()
        .map(|s| (s.doc_id.as_str(), s.sent_index))
        .collect();
    for p in predictions {
        if !known.contains(&(p.doc_id.as_str(), p.sent_index)) {
            return Err(Error::Invariant {
                doc_id: p.doc_id.clone(),
                field: "sent_index".into(),
                message: format!("prediction for unknown sentence {}", p.sent_index),
            });
        }
        by_key.insert((p.pico, p.doc_id.as_str(), p.sent_index), p);
        gates.entry(p.pico).or_default().insert(p.gate);
        hashes.extend(p.config_hash.clone());
    }

    let mut report = EvalReport {
        label: None,
        config_hash: (hashes.len() == 1).then(|| hashes.into_iter().next().unwrap()),
        types: Vec::new(),
    };
    for (pico, gate_set) in gates {
        let mut token = TokenMetrics::default();
        let mut errors = ErrorCounts::default();
        let mut predicted_labels = Vec::new();
        let mut gold_labels = Vec::new();
        let mut missing = 0;
        for s in &corpus.sentences {
            let Some(gold) = s.expert_spans(pico) else {
                continue;
            };
            let predicted: BTreeSet<Span> = match by_key.get(&(pico, s.doc_id.as_str(), s.sent_index)) {
                Some(p) => p.spans.iter().copied().collect(),
                None => {
                    missing += 1;
                    BTreeSet::new()
                }
            };
            let positive = by_key
                .get(&(pico, s.doc_id.as_str(), s.sent_index))
                .is_some_and(|p| p.positive);
            let pred_vec: Vec<Span> = predicted.iter().copied().collect();
            let gold_vec: Vec<Span> = gold.iter().copied().collect();
            token += token_prf(&pred_vec, &gold_vec, s.len())?;
            errors += classify_errors(&predicted, gold);
            predicted_labels.push(positive);
            gold_labels.push(!gold.is_empty());
        }
        let reduction = match dumps {
            Some(d) => {
                let counts: Vec<(usize, usize)> = d
                    .iter()
                    .filter(|r| r.pico == pico)
                    .map(|r| (r.total_candidates, r.eliminated))
                    .collect();
                Some(reduction_stats(&counts)?)
            }
            None => None,
        };
        report.types.push(TypeReport {
            pico,
            gate: (gate_set.len() == 1).then(|| *gate_set.iter().next().unwrap()),
            sentences: gold_labels.len(),
            missing_predictions: missing,
            token,
            sentence: sentence_metrics(&predicted_labels, &gold_labels)?,
            errors,
            reduction,
        });
    }
    Ok(report)
}

/// Plain-text tables: token-wise span metrics, sentence classification,
/// error counts and candidate reduction, one row per report and type.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let name = |r: &EvalReport, t: &TypeReport| {
        let gate = t.gate.map_or("mixed".to_string(), |g| g.to_string());
        match &r.label {
            Some(l) => format!("{l} {} {gate}", t.pico),
            None => format!("{} {gate}", t.pico),
        }
    };
    let rows: Vec<(String, &TypeReport)> = reports
        .iter()
        .flat_map(|r| r.types.iter().map(move |t| (name(r, t), t)))
        .collect();
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);

    let _ = writeln!(out, "Token-wise span detection");
    let _ = writeln!(out, "{:width$}  {:>9} {:>9} {:>9} {:>9}", "run", "precision", "recall", "f1", "sentences");
    for (n, t) in &rows {
        let _ = writeln!(
            out,
            "{n:width$}  {:>9.4} {:>9.4} {:>9.4} {:>9}",
            t.token.precision, t.token.recall, t.token.f1, t.sentences
        );
    }
    let _ = writeln!(out, "\nSentence classification");
    let _ = writeln!(out, "{:width$}  {:>9} {:>9} {:>9} {:>9}", "run", "accuracy", "precision", "recall", "f1");
    for (n, t) in &rows {
        let s = &t.sentence;
        let _ = writeln!(out, "{n:width$}  {:>9.4} {:>9.4} {:>9.4} {:>9.4}", s.accuracy, s.precision, s.recall, s.f1);
    }
    let _ = writeln!(out, "\nErrors");
    let _ = writeln!(out, "{:width$}  {:>7} {:>7} {:>7} {:>7} {:>7}", "run", "exact", "BE", "OE", "FP", "FN");
    for (n, t) in &rows {
        let e = &t.errors;
        let _ = writeln!(
            out,
            "{n:width$}  {:>7} {:>7} {:>7} {:>7} {:>7}",
            e.exact, e.boundary, e.overlap, e.false_positive, e.false_negative
        );
    }
    if rows.iter().any(|(_, t)| t.reduction.is_some()) {
        let _ = writeln!(out, "\nCandidate reduction");
        let _ = writeln!(out, "{:width$}  {:>10} {:>10} {:>7}", "run", "candidates", "eliminated", "ratio");
        for (n, t) in &rows {
            if let Some(r) = &t.reduction {
                let _ = writeln!(out, "{n:width$}  {:>10} {:>10} {:>7.4}", r.total_candidates, r.eliminated, r.ratio);
            }
        }
    }
    out
}
