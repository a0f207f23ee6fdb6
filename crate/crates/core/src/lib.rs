//! Weakly supervised PICO span detection.
//!
//! A sentence classifier trained only on crowd-derived sentence labels is used
//! to locate spans: each candidate span is masked, the sentence is re-scored,
//! and the spans whose removal costs the most score are selected.

pub mod artifacts;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod eval;
pub mod inference;
pub mod labels;
pub mod pipeline;
pub mod report;
pub mod scorer;
pub mod synthetic;
pub mod tokenize;

pub use corpus::{Corpus, PicoType, SentenceRecord, Span, Split, Token};
pub use engine::{score_all_candidates, SpanConfig};
pub use error::{Error, Result};
pub use inference::{detect_spans, top_k_select, DetectionResult, Gate};
pub use labels::{derive_sentence_label, LabelMode};
