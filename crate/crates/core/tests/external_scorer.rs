//! The external-scorer client against in-process protocol servers.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use sent2span::corpus::Split;
use sent2span::engine::SpanConfig;
use sent2span::inference::Gate;
use sent2span::pipeline::{detect_corpus, labeled_sentences};
use sent2span::scorer::protocol::{respond, serve, Handshake, Response};
use sent2span::scorer::{
    run_conformance, train_baseline, BaselineScorerModel, Endpoint, ExternalScorer, ScoreRequest, SentenceScorer,
    TrainConfig,
};
use sent2span::synthetic::{generate, SyntheticConfig};
use sent2span::{Error, LabelMode, PicoType, Span};

#[derive(Clone, Copy)]
enum Behaviour {
    /// Collects whatever arrives within a short window and answers it in reverse.
    Reverse,
    /// Answers in order but with every id shifted by one.
    ShiftIds,
    /// Closes the connection after the first request of each connection.
    HangUp,
}

fn toy_model() -> BaselineScorerModel {
    let data: Vec<(Vec<String>, bool)> = (0..40)
        .map(|k| {
            let mut t: Vec<String> = ["the", "study", "was", "run", "at", "a", "centre"].map(String::from).into();
            if k % 2 == 0 {
                t.insert(k % 5, "diabetes".into());
            }
            (t, k % 2 == 0)
        })
        .collect();
    let config = TrainConfig {
        epochs: 5,
        feature_dim: 1024,
        ..Default::default()
    };
    train_baseline(&data, None, PicoType::Population, &config).unwrap()
}

fn handle(stream: TcpStream, scorer: &BaselineScorerModel, behaviour: Behaviour) {
    stream.set_nodelay(true).unwrap();
    let mut writer = stream.try_clone().unwrap();
    if let Behaviour::Reverse = behaviour {
        stream.set_read_timeout(Some(Duration::from_millis(5))).unwrap();
    }
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let hello = serde_json::to_string(&Handshake::current()).unwrap();
    writeln!(writer, "{hello}").unwrap();

    let mut pending: Vec<String> = Vec::new();
    line.clear();
    loop {
        match reader.read_line(&mut line) {
            Ok(0) => return,
            Ok(_) => {
                let request = std::mem::take(&mut line).trim().to_string();
                match behaviour {
                    Behaviour::Reverse => pending.push(request),
                    Behaviour::ShiftIds => {
                        let shifted = match respond(scorer, &request) {
                            Response::Score { id, pos_score, neg_score, effective_length } => Response::Score {
                                id: id + 1,
                                pos_score,
                                neg_score,
                                effective_length,
                            },
                            other => other,
                        };
                        writeln!(writer, "{}", serde_json::to_string(&shifted).unwrap()).unwrap();
                    }
                    Behaviour::HangUp => return,
                }
            }
            // quiet period: answer everything collected so far, newest first;
            // a partial line stays in `line` until the rest arrives
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                for request in pending.drain(..).rev() {
                    if writeln!(writer, "{}", serde_json::to_string(&respond(scorer, &request)).unwrap()).is_err() {
                        return;
                    }
                }
            }
            Err(_) => return,
        }
    }
}

fn spawn_server(scorer: BaselineScorerModel, behaviour: Behaviour) -> Endpoint {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let scorer = Arc::new(scorer);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { return };
            let scorer = Arc::clone(&scorer);
            thread::spawn(move || handle(stream, &scorer, behaviour));
        }
    });
    Endpoint::Tcp(addr.to_string())
}

fn tokens(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

#[test]
fn reordered_responses_are_matched_by_id() {
    let model = toy_model();
    let client = ExternalScorer::connect(spawn_server(model.clone(), Behaviour::Reverse), PicoType::Population).unwrap();
    let t = tokens(&["patients", "with", "diabetes", "were", "enrolled", "today"]);
    let spans: Vec<Option<Span>> = std::iter::once(None)
        .chain((0..6).flat_map(|s| (s + 1..=6).map(move |e| Some(Span::new(s, e)))))
        .collect();
    let requests: Vec<ScoreRequest> = spans.iter().map(|&mask| ScoreRequest { tokens: &t, mask }).collect();
    let remote = client.score_batch(&requests).unwrap();
    let local = model.score_batch(&requests).unwrap();
    assert_eq!(remote, local);

    // the connection stays usable for further batches
    assert_eq!(client.score_batch(&requests[..3]).unwrap(), local[..3]);
}

#[test]
fn detection_through_the_client_matches_in_process() {
    let train = generate(&SyntheticConfig { sentences: 120, ..Default::default() }, Split::Train).unwrap();
    let test = generate(&SyntheticConfig { sentences: 30, seed: 9, ..Default::default() }, Split::Test).unwrap();
    let labeled = labeled_sentences(&train, PicoType::Population, LabelMode::Minor).unwrap();
    let config = TrainConfig {
        feature_dim: 4096,
        ..Default::default()
    };
    let model = train_baseline(&labeled, None, PicoType::Population, &config).unwrap();
    let client = ExternalScorer::connect(spawn_server(model.clone(), Behaviour::Reverse), PicoType::Population).unwrap();

    let span_config = SpanConfig::default();
    let local = detect_corpus(&test, &model, PicoType::Population, &span_config, Gate::Predicted, None).unwrap();
    let remote = detect_corpus(&test, &client, PicoType::Population, &span_config, Gate::Predicted, None).unwrap();
    assert_eq!(remote.predictions, local.predictions);
    assert_eq!(remote.dumps, local.dumps);
}

#[test]
fn conformance_passes_for_a_correct_server() {
    let endpoint = spawn_server(toy_model(), Behaviour::Reverse);
    let report = run_conformance(&endpoint, PicoType::Population);
    assert!(report.passed(), "{report}");
    assert!(report.checks.len() >= 4);
}

#[test]
fn conformance_fails_on_wrong_ids() {
    let endpoint = spawn_server(toy_model(), Behaviour::ShiftIds);
    let report = run_conformance(&endpoint, PicoType::Population);
    assert!(!report.passed());
    let (name, ok, _) = &report.checks[0];
    assert_eq!(name, "handshake");
    assert!(ok);
}

#[test]
fn id_mismatch_is_a_protocol_error() {
    let client = ExternalScorer::connect(spawn_server(toy_model(), Behaviour::ShiftIds), PicoType::Population).unwrap();
    let t = tokens(&["a", "b"]);
    let err = client.score_batch(&[ScoreRequest { tokens: &t, mask: None }]).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
    assert!(err.is_transport());
}

#[test]
fn dropped_connection_is_a_transport_error_and_client_reconnects() {
    let client = ExternalScorer::connect(spawn_server(toy_model(), Behaviour::HangUp), PicoType::Population).unwrap();
    let t = tokens(&["a", "b"]);
    let req = [ScoreRequest { tokens: &t, mask: None }];
    for _ in 0..2 {
        let err = client.score_batch(&req).unwrap_err();
        assert!(matches!(err, Error::Transport(_)), "{err}");
    }
}

#[test]
fn invalid_mask_never_reaches_the_wire() {
    let client = ExternalScorer::connect(spawn_server(toy_model(), Behaviour::Reverse), PicoType::Population).unwrap();
    let t = tokens(&["a", "b"]);
    let err = client
        .score_batch(&[ScoreRequest {
            tokens: &t,
            mask: Some(Span::new(1, 3)),
        }])
        .unwrap_err();
    assert!(matches!(err, Error::Precondition(_)), "{err}");
}

#[cfg(unix)]
#[test]
fn unix_socket_endpoint() {
    use std::os::unix::net::UnixListener;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scorer.sock");
    let listener = UnixListener::bind(&path).unwrap();
    let model = toy_model();
    let server_model = model.clone();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let reader = BufReader::new(stream.try_clone().unwrap());
        let _ = serve(&server_model, reader, stream);
    });
    let endpoint: Endpoint = format!("unix:{}", path.display()).parse().unwrap();
    let client = ExternalScorer::connect(endpoint, PicoType::Population).unwrap();
    let t = tokens(&["diabetes", "study"]);
    let req = [ScoreRequest { tokens: &t, mask: Some(Span::new(0, 1)) }];
    assert_eq!(client.score_batch(&req).unwrap(), model.score_batch(&req).unwrap());
}
