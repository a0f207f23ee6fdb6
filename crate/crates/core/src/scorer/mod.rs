//! Sentence scorers.
//!
//! A scorer maps a token sequence, optionally with one span replaced by mask
//! tokens, to a pair of pre-softmax class scores. Two implementations exist:
//! the in-process [`BaselineScorerModel`] and [`ExternalScorer`], a client for
//! scorer services speaking the line protocol in [`protocol`].

mod baseline;
mod external;
pub mod protocol;

pub use baseline::{
    objective_and_gradient, train_baseline, BaselineScorerModel, Gradient, SparseFeatures,
    TrainConfig, DEFAULT_FEATURE_DIM, DEFAULT_MASK_TOKEN, DEFAULT_MAX_TOKENS,
};
pub use external::{run_conformance, ConformanceReport, Endpoint, ExternalScorer};

use serde::{Deserialize, Serialize};

use crate::corpus::{PicoType, Span};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub positive_score: f64,
    pub negative_score: f64,
    pub probability: f64,
    pub effective_length: usize,
}

impl ScoreResult {
    pub fn from_scores(positive_score: f64, negative_score: f64, effective_length: usize) -> Self {
        ScoreResult {
            positive_score,
            negative_score,
            probability: softmax_positive(positive_score, negative_score),
            effective_length,
        }
    }
}

/// `exp(pos) / (exp(pos) + exp(neg))`, evaluated without overflow.
pub fn softmax_positive(pos: f64, neg: f64) -> f64 {
    let d = neg - pos;
    if d > 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScoreRequest<'a> {
    pub tokens: &'a [String],
    pub mask: Option<Span>,
}

pub trait SentenceScorer: Send + Sync {
    /// The PICO type this scorer was trained for, when known.
    fn pico_type(&self) -> Option<PicoType>;

    /// Scores every request. Results are returned in request order.
    fn score_batch(&self, requests: &[ScoreRequest<'_>]) -> Result<Vec<ScoreResult>>;
}

pub(crate) fn check_request(req: &ScoreRequest<'_>) -> Result<()> {
    if req.tokens.is_empty() {
        return Err(Error::Precondition("cannot score an empty sentence".into()));
    }
    if let Some(mask) = req.mask {
        mask.validate(req.tokens.len())
            .map_err(|_| Error::Precondition(format!("mask {mask} invalid for {} tokens", req.tokens.len())))?;
    }
    Ok(())
}

/// Replaces every token inside `mask` with `mask_token`, keeping the length.
pub fn apply_mask(tokens: &[String], mask: Option<Span>, mask_token: &str) -> Vec<String> {
    tokens
        .iter()
        .enumerate()
        .map(|(k, t)| match mask {
            Some(m) if m.indices().contains(&k) => mask_token.to_string(),
            _ => t.clone(),
        })
        .collect()
}

pub enum ScorerHandle {
    Baseline(BaselineScorerModel),
    External(ExternalScorer),
}

impl SentenceScorer for ScorerHandle {
    fn pico_type(&self) -> Option<PicoType> {
        match self {
            ScorerHandle::Baseline(m) => m.pico_type(),
            ScorerHandle::External(e) => e.pico_type(),
        }
    }

    fn score_batch(&self, requests: &[ScoreRequest<'_>]) -> Result<Vec<ScoreResult>> {
        match self {
            ScorerHandle::Baseline(m) => m.score_batch(requests),
            ScorerHandle::External(e) => e.score_batch(requests),
        }
    }
}

pub fn score_sentence(
    scorer: &dyn SentenceScorer,
    tokens: &[String],
    mask: Option<Span>,
) -> Result<ScoreResult> {
    let mut out = scorer.score_batch(&[ScoreRequest { tokens, mask }])?;
    out.pop()
        .ok_or_else(|| Error::Protocol("scorer returned no result".into()))
}

/// Returns `(probability >= threshold, probability)` for the unmasked sentence.
pub fn predict_sentence_class(
    scorer: &dyn SentenceScorer,
    tokens: &[String],
    threshold: f64,
) -> Result<(bool, f64)> {
    let result = score_sentence(scorer, tokens, None)?;
    Ok((result.probability >= threshold, result.probability))
}
