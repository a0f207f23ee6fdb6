use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::Mutex;

use super::protocol::{Handshake, Request, Response, PROTOCOL_VERSION};
use super::{check_request, ScoreRequest, ScoreResult, SentenceScorer};
use crate::corpus::{PicoType, Span};
use crate::error::{Error, Result};

/// Where an external scorer lives.
///
/// * `tcp://host:port`
/// * `unix:/path/to/socket` (Unix only)
/// * `exec:program arg...` spawns a process and talks over its stdin/stdout
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    Unix(String),
    Exec(Vec<String>),
}

impl FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(addr) = s.strip_prefix("tcp://") {
            Ok(Endpoint::Tcp(addr.to_string()))
        } else if let Some(path) = s.strip_prefix("unix://").or_else(|| s.strip_prefix("unix:")) {
            Ok(Endpoint::Unix(path.to_string()))
        } else if let Some(cmd) = s.strip_prefix("exec:") {
            let argv: Vec<String> = cmd.split_whitespace().map(String::from).collect();
            if argv.is_empty() {
                return Err(Error::Config("exec endpoint without a command".into()));
            }
            Ok(Endpoint::Exec(argv))
        } else {
            Err(Error::Config(format!(
                "unrecognized scorer endpoint `{s}` (expected tcp://, unix: or exec:)"
            )))
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(a) => write!(f, "tcp://{a}"),
            Endpoint::Unix(p) => write!(f, "unix:{p}"),
            Endpoint::Exec(argv) => write!(f, "exec:{}", argv.join(" ")),
        }
    }
}

fn transport(e: impl fmt::Display) -> Error {
    Error::Transport(e.to_string())
}

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl Connection {
    fn open(endpoint: &Endpoint) -> Result<Self> {
        let mut conn = match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr).map_err(transport)?;
                stream.set_nodelay(true).map_err(transport)?;
                let read_half = stream.try_clone().map_err(transport)?;
                Connection {
                    reader: Box::new(BufReader::new(read_half)),
                    writer: Box::new(BufWriter::new(stream)),
                    child: None,
                }
            }
            #[cfg(unix)]
            Endpoint::Unix(path) => {
                let stream = std::os::unix::net::UnixStream::connect(path).map_err(transport)?;
                let read_half = stream.try_clone().map_err(transport)?;
                Connection {
                    reader: Box::new(BufReader::new(read_half)),
                    writer: Box::new(BufWriter::new(stream)),
                    child: None,
                }
            }
            #[cfg(not(unix))]
            Endpoint::Unix(_) => return Err(transport("unix sockets are not supported here")),
            Endpoint::Exec(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()
                    .map_err(|e| transport(format!("cannot start `{}`: {e}", argv[0])))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Connection {
                    reader: Box::new(BufReader::new(stdout)),
                    writer: Box::new(BufWriter::new(stdin)),
                    child: Some(child),
                }
            }
        };
        conn.handshake()?;
        Ok(conn)
    }

    fn handshake(&mut self) -> Result<()> {
        self.send_lines(&[serde_json::to_string(&Handshake::current())?])?;
        let line = self.read_line()?;
        let hello: Handshake = serde_json::from_str(&line)
            .map_err(|e| Error::Protocol(format!("bad handshake `{line}`: {e}")))?;
        if hello.protocol != PROTOCOL_VERSION {
            return Err(Error::Protocol(format!(
                "scorer speaks `{}`, expected `{PROTOCOL_VERSION}`",
                hello.protocol
            )));
        }
        Ok(())
    }

    fn send_lines(&mut self, lines: &[String]) -> Result<()> {
        for line in lines {
            self.writer.write_all(line.as_bytes()).map_err(transport)?;
            self.writer.write_all(b"\n").map_err(transport)?;
        }
        self.writer.flush().map_err(transport)
    }

    fn read_line(&mut self) -> Result<String> {
        let mut line = String::new();
        loop {
            line.clear();
            let n = self.reader.read_line(&mut line).map_err(transport)?;
            if n == 0 {
                return Err(transport("scorer closed the connection"));
            }
            if !line.trim().is_empty() {
                return Ok(line.trim_end().to_string());
            }
        }
    }

    /// Writes all lines from a helper thread while reading `expected`
    /// responses here, so neither side can stall on a full pipe.
    fn exchange(&mut self, lines: &[String], expected: usize) -> Result<Vec<Response>> {
        let Connection { reader, writer, .. } = self;
        std::thread::scope(|scope| {
            let sender = scope.spawn(move || -> Result<()> {
                for line in lines {
                    writer.write_all(line.as_bytes()).map_err(transport)?;
                    writer.write_all(b"\n").map_err(transport)?;
                }
                writer.flush().map_err(transport)
            });
            let mut responses = Vec::with_capacity(expected);
            let mut buf = String::new();
            while responses.len() < expected {
                buf.clear();
                let n = reader.read_line(&mut buf).map_err(transport)?;
                if n == 0 {
                    return Err(transport("scorer closed the connection"));
                }
                let line = buf.trim();
                if line.is_empty() {
                    continue;
                }
                responses.push(
                    serde_json::from_str(line)
                        .map_err(|e| Error::Protocol(format!("bad response `{line}`: {e}")))?,
                );
            }
            sender.join().map_err(|_| transport("writer thread panicked"))??;
            Ok(responses)
        })
    }
}

/// Client for a scorer service.
///
/// Requests in one batch are written back to back and matched to responses
/// by id, in whatever order they arrive.
pub struct ExternalScorer {
    endpoint: Endpoint,
    pico: PicoType,
    state: Mutex<ClientState>,
}

struct ClientState {
    conn: Option<Connection>,
    next_id: u64,
}

impl fmt::Debug for ExternalScorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExternalScorer")
            .field("endpoint", &self.endpoint)
            .field("pico", &self.pico)
            .finish()
    }
}

impl ExternalScorer {
    /// Connects and performs the handshake.
    pub fn connect(endpoint: Endpoint, pico: PicoType) -> Result<Self> {
        let conn = Connection::open(&endpoint)?;
        Ok(ExternalScorer {
            endpoint,
            pico,
            state: Mutex::new(ClientState {
                conn: Some(conn),
                next_id: 0,
            }),
        })
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }
}

impl SentenceScorer for ExternalScorer {
    fn pico_type(&self) -> Option<PicoType> {
        Some(self.pico)
    }

    fn score_batch(&self, requests: &[ScoreRequest<'_>]) -> Result<Vec<ScoreResult>> {
        for r in requests {
            check_request(r)?;
        }
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let mut state = self.state.lock().map_err(|_| transport("scorer client lock poisoned"))?;
        let first_id = state.next_id;
        state.next_id += requests.len() as u64;

        let mut lines = Vec::with_capacity(requests.len());
        for (k, r) in requests.iter().enumerate() {
            let req = Request {
                id: first_id + k as u64,
                pico: self.pico,
                tokens: r.tokens.to_vec(),
                mask: r.mask,
            };
            lines.push(serde_json::to_string(&req)?);
        }

        // A previous failure leaves the stream in an unknown state: reconnect.
        if state.conn.is_none() {
            state.conn = Some(Connection::open(&self.endpoint)?);
        }
        let conn = state.conn.as_mut().expect("connection present");
        let responses = match conn.exchange(&lines, requests.len()) {
            Ok(r) => r,
            Err(e) => {
                state.conn = None;
                return Err(e);
            }
        };

        let mut by_id: HashMap<u64, ScoreResult> = HashMap::with_capacity(requests.len());
        let mut failure = None;
        for response in responses {
            let id = response.id();
            let slot = id
                .and_then(|id| id.checked_sub(first_id))
                .filter(|k| *k < requests.len() as u64);
            let Some(k) = slot else {
                failure = Some(Error::Protocol(format!("response with unexpected id {id:?}")));
                continue;
            };
            match response {
                Response::Error { error, .. } => {
                    failure.get_or_insert(Error::Protocol(format!("scorer rejected request {}: {error}", first_id + k)));
                }
                Response::Score { id, pos_score, neg_score, effective_length } => {
                    let n = requests[k as usize].tokens.len();
                    if !(pos_score.is_finite() && neg_score.is_finite()) || effective_length == 0 || effective_length > n {
                        failure.get_or_insert(Error::Protocol(format!(
                            "invalid score for request {id}: ({pos_score}, {neg_score}), effective_length {effective_length} of {n}"
                        )));
                        continue;
                    }
                    if by_id.insert(id, ScoreResult::from_scores(pos_score, neg_score, effective_length)).is_some() {
                        failure.get_or_insert(Error::Protocol(format!("duplicate response for request {id}")));
                    }
                }
            }
        }
        if let Some(e) = failure {
            state.conn = None;
            return Err(e);
        }
        (0..requests.len() as u64)
            .map(|k| {
                by_id
                    .remove(&(first_id + k))
                    .ok_or_else(|| Error::Protocol(format!("no response for request {}", first_id + k)))
            })
            .collect()
    }
}

/// Outcome of [`run_conformance`]: one `(check, passed, detail)` per check.
#[derive(Debug, Clone, Default)]
pub struct ConformanceReport {
    pub checks: Vec<(String, bool, String)>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|(_, ok, _)| *ok)
    }

    fn record(&mut self, name: &str, outcome: Result<()>) {
        let (ok, detail) = match outcome {
            Ok(()) => (true, String::new()),
            Err(e) => (false, e.to_string()),
        };
        self.checks.push((name.to_string(), ok, detail));
    }
}

impl fmt::Display for ConformanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, ok, detail) in &self.checks {
            let mark = if *ok { "PASS" } else { "FAIL" };
            writeln!(f, "{mark} {name}{}", if detail.is_empty() { String::new() } else { format!(": {detail}") })?;
        }
        Ok(())
    }
}

fn request_line(id: u64, pico: PicoType, tokens: &[String], mask: Option<Span>) -> Result<String> {
    Ok(serde_json::to_string(&Request {
        id,
        pico,
        tokens: tokens.to_vec(),
        mask,
    })?)
}

fn expect_ids(responses: &[Response], ids: &[u64]) -> Result<()> {
    let got: HashSet<Option<u64>> = responses.iter().map(Response::id).collect();
    let want: HashSet<Option<u64>> = ids.iter().map(|i| Some(*i)).collect();
    if got != want || responses.len() != ids.len() {
        return Err(Error::Protocol(format!("expected ids {ids:?}, got {got:?}")));
    }
    for r in responses {
        if let Response::Error { error, .. } = r {
            return Err(Error::Protocol(format!("unexpected error response: {error}")));
        }
    }
    Ok(())
}

/// Drives a scorer service through the protocol contract: handshake, id
/// correlation, out-of-order batches, determinism, and error lines that do
/// not end the stream.
pub fn run_conformance(endpoint: &Endpoint, pico: PicoType) -> ConformanceReport {
    let mut report = ConformanceReport::default();
    let mut conn = match Connection::open(endpoint) {
        Ok(c) => {
            report.record("handshake", Ok(()));
            c
        }
        Err(e) => {
            report.record("handshake", Err(e));
            return report;
        }
    };
    let tokens: Vec<String> = ["adults", "with", "asthma", "were", "randomised"]
        .map(String::from)
        .into();

    let pair = (|| -> Result<()> {
        let lines = [
            request_line(1, pico, &tokens, None)?,
            request_line(2, pico, &tokens, Some(Span::new(0, 1)))?,
        ];
        let responses = conn.exchange(&lines, 2)?;
        expect_ids(&responses, &[1, 2])
    })();
    report.record("unmasked and masked requests keep their ids", pair);

    let batch = (|| -> Result<()> {
        let mut lines = Vec::new();
        let mut ids = Vec::new();
        for k in 0..64u64 {
            let start = (k as usize) % tokens.len();
            let end = (start + 1 + (k as usize / tokens.len()) % 2).min(tokens.len());
            lines.push(request_line(100 + k, pico, &tokens, Some(Span::new(start, end)))?);
            ids.push(100 + k);
        }
        let responses = conn.exchange(&lines, 64)?;
        expect_ids(&responses, &ids)?;
        for r in &responses {
            if let Response::Score { effective_length, .. } = r {
                if *effective_length == 0 || *effective_length > tokens.len() {
                    return Err(Error::Protocol(format!("effective_length {effective_length} out of range")));
                }
            }
        }
        Ok(())
    })();
    report.record("batch of 64 answered in any order", batch);

    let determinism = (|| -> Result<()> {
        let lines = [
            request_line(200, pico, &tokens, Some(Span::new(1, 3)))?,
            request_line(201, pico, &tokens, Some(Span::new(1, 3)))?,
        ];
        let responses = conn.exchange(&lines, 2)?;
        expect_ids(&responses, &[200, 201])?;
        let scores: Vec<(f64, f64)> = responses
            .iter()
            .filter_map(|r| match r {
                Response::Score { pos_score, neg_score, .. } => Some((*pos_score, *neg_score)),
                _ => None,
            })
            .collect();
        if scores[0].0.to_bits() != scores[1].0.to_bits() || scores[0].1.to_bits() != scores[1].1.to_bits() {
            return Err(Error::Protocol(format!("identical requests scored {scores:?}")));
        }
        Ok(())
    })();
    report.record("identical requests score identically", determinism);

    let malformed = (|| -> Result<()> {
        let lines = [r#"{"id":300,"pico":"population","tokens":42}"#.to_string()];
        let responses = conn.exchange(&lines, 1)?;
        match &responses[0] {
            Response::Error { id: Some(300), .. } => {}
            other => return Err(Error::Protocol(format!("expected error for id 300, got {other:?}"))),
        }
        let follow_up = conn.exchange(&[request_line(301, pico, &tokens, None)?], 1)?;
        expect_ids(&follow_up, &[301])
    })();
    report.record("malformed request yields an error line and the stream continues", malformed);

    report
}
