//! The `sent2span-scorer/1` line protocol.
//!
//! Newline-delimited JSON in both directions. Each side first sends the
//! handshake line `{"protocol": "sent2span-scorer/1"}`. After that the client
//! sends requests
//!
//! ```json
//! {"id": 7, "pico": "population", "tokens": ["a", "b"], "mask": [0, 1]}
//! ```
//!
//! and the server answers each with either
//! `{"id": 7, "pos_score": 1.2, "neg_score": -0.4, "effective_length": 2}` or
//! `{"id": 7, "error": "..."}`. Responses may come in any order.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{ScoreRequest, SentenceScorer};
use crate::corpus::{PicoType, Span};
use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: &str = "sent2span-scorer/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: String,
}

impl Handshake {
    pub fn current() -> Self {
        Handshake {
            protocol: PROTOCOL_VERSION.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub pico: PicoType,
    pub tokens: Vec<String>,
    pub mask: Option<Span>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    Score {
        id: u64,
        pos_score: f64,
        neg_score: f64,
        effective_length: usize,
    },
    Error {
        id: Option<u64>,
        error: String,
    },
}

impl Response {
    pub fn id(&self) -> Option<u64> {
        match self {
            Response::Score { id, .. } => Some(*id),
            Response::Error { id, .. } => *id,
        }
    }
}

/// Serves the protocol over a line stream until the reader is exhausted.
///
/// Malformed or failing requests produce an error line and the stream
/// continues. The handshake must be the first line.
pub fn serve<R: BufRead, W: Write>(scorer: &dyn SentenceScorer, reader: R, mut writer: W) -> Result<()> {
    let io = |e: std::io::Error| Error::Transport(e.to_string());
    let mut lines = reader.lines();

    let first = lines
        .next()
        .ok_or_else(|| Error::Protocol("stream closed before handshake".into()))?
        .map_err(io)?;
    let hello: Handshake = serde_json::from_str(&first)
        .map_err(|e| Error::Protocol(format!("bad handshake: {e}")))?;
    if hello.protocol != PROTOCOL_VERSION {
        return Err(Error::Protocol(format!("unsupported protocol `{}`", hello.protocol)));
    }
    writeln!(writer, "{}", serde_json::to_string(&Handshake::current())?).map_err(io)?;
    writer.flush().map_err(io)?;

    for line in lines {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let response = respond(scorer, &line);
        writeln!(writer, "{}", serde_json::to_string(&response)?).map_err(io)?;
        writer.flush().map_err(io)?;
    }
    Ok(())
}

/// The response to one request line. Never fails: problems become error responses.
pub fn respond(scorer: &dyn SentenceScorer, line: &str) -> Response {
    let request: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(|id| id.as_u64()));
            return Response::Error {
                id,
                error: format!("malformed request: {e}"),
            };
        }
    };
    if let Some(expected) = scorer.pico_type() {
        if expected != request.pico {
            return Response::Error {
                id: Some(request.id),
                error: format!("scorer serves {expected}, not {}", request.pico),
            };
        }
    }
    let req = ScoreRequest {
        tokens: &request.tokens,
        mask: request.mask,
    };
    match scorer.score_batch(&[req]) {
        Ok(mut r) if r.len() == 1 => {
            let r = r.remove(0);
            Response::Score {
                id: request.id,
                pos_score: r.positive_score,
                neg_score: r.negative_score,
                effective_length: r.effective_length,
            }
        }
        Ok(_) => Response::Error {
            id: Some(request.id),
            error: "scorer returned wrong number of results".into(),
        },
        Err(e) => Response::Error {
            id: Some(request.id),
            error: e.to_string(),
        },
    }
}

#[cfg(test)]
mod tests {
    use std::io::Cursor;

    use super::*;
    use crate::scorer::BaselineScorerModel;

    #[test]
    fn request_wire_format() {
        let r = Request {
            id: 3,
            pico: PicoType::Outcome,
            tokens: vec!["a".into()],
            mask: None,
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"id":3,"pico":"outcome","tokens":["a"],"mask":null}"#
        );
        let masked: Request =
            serde_json::from_str(r#"{"id":4,"pico":"population","tokens":["a","b"],"mask":[0,1]}"#).unwrap();
        assert_eq!(masked.mask, Some(Span::new(0, 1)));
    }

    #[test]
    fn response_variants() {
        let ok: Response =
            serde_json::from_str(r#"{"id":1,"pos_score":0.5,"neg_score":-1.0,"effective_length":4}"#).unwrap();
        assert!(matches!(ok, Response::Score { id: 1, effective_length: 4, .. }));
        let err: Response = serde_json::from_str(r#"{"id":2,"error":"nope"}"#).unwrap();
        assert_eq!(err.id(), Some(2));
    }

    #[test]
    fn serve_answers_and_survives_bad_lines() {
        let model = BaselineScorerModel::zeros(PicoType::Population, 8, 0);
        let input = [
            r#"{"protocol":"sent2span-scorer/1"}"#,
            r#"{"id":1,"pico":"population","tokens":["a","b"],"mask":null}"#,
            r#"{"id":2,"pico":"population","tokens":"oops"}"#,
            r#"{"id":3,"pico":"population","tokens":["a"],"mask":[0,2]}"#,
            r#"{"id":4,"pico":"outcome","tokens":["a"],"mask":null}"#,
            r#"{"id":5,"pico":"population","tokens":["a"],"mask":[0,1]}"#,
        ]
        .join("\n");
        let mut out = Vec::new();
        serve(&model, Cursor::new(input), &mut out).unwrap();
        let lines: Vec<&str> = std::str::from_utf8(&out).unwrap().lines().collect();
        assert_eq!(lines[0], r#"{"protocol":"sent2span-scorer/1"}"#);
        let responses: Vec<Response> = lines[1..].iter().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(responses.len(), 5);
        assert!(matches!(responses[0], Response::Score { id: 1, .. }));
        assert!(matches!(responses[1], Response::Error { id: Some(2), .. }));
        assert!(matches!(responses[2], Response::Error { id: Some(3), .. }));
        assert!(matches!(responses[3], Response::Error { id: Some(4), .. }));
        assert!(matches!(responses[4], Response::Score { id: 5, .. }));
    }

    #[test]
    fn serve_rejects_wrong_version() {
        let model = BaselineScorerModel::zeros(PicoType::Population, 8, 0);
        let err = serve(&model, Cursor::new(r#"{"protocol":"other/9"}"#), Vec::new()).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }
}
