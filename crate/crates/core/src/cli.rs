//! The `sent2span` command line.
//!
//! Every subcommand that reads a run configuration accepts `--config FILE`
//! plus flags; flags override the file, and `SENT2SPAN_SCORER` overrides the
//! scorer endpoint of the file but not `--scorer`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::artifacts::{read_jsonl, write_jsonl, PredictionRecord, ScoredDumpRecord};
use crate::config::{RunConfig, RunRecord, SCORER_ENV};
use crate::corpus::{load_corpus, save_corpus, Corpus, PicoType, Split};
use crate::engine::ScoreMode;
use crate::error::{Error, Result};
use crate::inference::Gate;
use crate::labels::LabelMode;
use crate::pipeline::{detect_corpus, labeled_sentences, weak_labels};
use crate::report::{evaluate, render_table, EvalReport};
use crate::scorer::{run_conformance, train_baseline, BaselineScorerModel, Endpoint, ExternalScorer, ScorerHandle};
use crate::synthetic::{generate, SyntheticConfig};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_TRANSPORT: i32 = 3;

#[derive(Parser)]
#[command(name = "sent2span", version, about = "Weakly supervised PICO span detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus file and write it in canonical form.
    Ingest(IngestArgs),
    /// Derive sentence labels from crowd annotations.
    Weaklabel(WeaklabelArgs),
    /// Train the baseline sentence scorer.
    Train(RunArgs),
    /// Detect spans and write predictions.
    Detect(RunArgs),
    /// Score predictions against expert spans.
    Evaluate(EvaluateArgs),
    /// Print several evaluation reports as one table.
    Report(ReportArgs),
    /// Write a synthetic corpus with planted phrases.
    Synth(SynthArgs),
    /// Check a scorer service against the wire protocol.
    Conformance(ConformanceArgs),
}

#[derive(Args, Default)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pico: Option<PicoType>,
    /// Label mode for training: agg, major or minor.
    #[arg(long)]
    mode: Option<LabelMode>,
    /// Sentence gate: predicted, crowd_agg, crowd_major or crowd_minor.
    #[arg(long)]
    gate: Option<Gate>,
    /// Corpus for the split this command reads (train for train/weaklabel, test for detect).
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long = "train-corpus")]
    train_corpus: Option<PathBuf>,
    #[arg(long = "dev-corpus")]
    dev_corpus: Option<PathBuf>,
    #[arg(long = "test-corpus")]
    test_corpus: Option<PathBuf>,
    /// Baseline model file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// External scorer endpoint (tcp://host:port, unix:PATH, exec:COMMAND).
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// K for the selected type.
    #[arg(long)]
    top_k: Option<usize>,
    /// M for the selected type.
    #[arg(long)]
    max_span_len: Option<usize>,
    /// Score every candidate, skipping nested-span elimination.
    #[arg(long)]
    no_eliminate: bool,
    /// logit or probability.
    #[arg(long, value_parser = parse_score_mode)]
    score_mode: Option<ScoreMode>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    feature_dim: Option<usize>,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct WeaklabelArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Emit every label mode instead of the configured one.
    #[arg(long)]
    all_modes: bool,
    /// Label file; defaults to labels.jsonl in the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predictions written by `detect`.
    #[arg(long)]
    pred: PathBuf,
    /// Corpus with expert spans; defaults to the configured test corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scored-candidate dump; defaults to scored.jsonl next to the predictions when present.
    #[arg(long)]
    scored: Option<PathBuf>,
    /// Row label in the table.
    #[arg(long)]
    label: Option<String>,
    /// Report file; defaults to report.json next to the predictions.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report files written by `evaluate`.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Write the combined reports as a JSON array.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 500)]
    sentences: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "population")]
    pico: PicoType,
}

#[derive(Args)]
struct ConformanceArgs {
    /// Endpoint to check; falls back to SENT2SPAN_SCORER.
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long, default_value = "population")]
    pico: PicoType,
}

fn parse_score_mode(s: &str) -> std::result::Result<ScoreMode, String> {
    match s {
        "logit" => Ok(ScoreMode::Logit),
        "probability" => Ok(ScoreMode::Probability),
        _ => Err(format!("expected `logit` or `probability`, got `{s}`")),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Transport(_) | Error::Protocol(_) => EXIT_TRANSPORT,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Runs one invocation with the process environment and standard streams.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let env_scorer = std::env::var(SCORER_ENV).ok().filter(|s| !s.is_empty());
    run_with(argv, env_scorer.as_deref(), &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_with<I, T>(argv: I, env_scorer: Option<&str>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli.command, env_scorer, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command, env_scorer: Option<&str>, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(&a, out),
        Command::Weaklabel(a) => weaklabel(&a, out),
        Command::Train(a) => train(&a, out),
        Command::Detect(a) => detect(&a, env_scorer, out),
        Command::Evaluate(a) => evaluate_cmd(&a, out),
        Command::Report(a) => report_cmd(&a, out),
        Command::Synth(a) => synth(&a, out),
        Command::Conformance(a) => conformance(&a, env_scorer, out),
    }
}

fn say(out: &mut dyn Write, text: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn resolve(args: &RunArgs, split: Split, env_scorer: Option<&str>) -> Result<RunConfig> {
    let mut c = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(e) = env_scorer {
        c.scorer.endpoint = Some(e.to_string());
    }
    if let Some(p) = args.pico {
        c.pico = p;
    }
    if let Some(m) = args.mode {
        c.label_mode = m;
    }
    if let Some(g) = args.gate {
        c.gate = g;
    }
    for (split, path) in [
        (Split::Train, &args.train_corpus),
        (Split::Dev, &args.dev_corpus),
        (Split::Test, &args.test_corpus),
    ] {
        if let Some(p) = path {
            c.corpus.set(split, p.clone());
        }
    }
    if let Some(p) = &args.corpus {
        c.corpus.set(split, p.clone());
    }
    if let Some(m) = &args.model {
        c.scorer.model = Some(m.clone());
    }
    if let Some(s) = &args.scorer {
        c.scorer.endpoint = Some(s.clone());
    }
    if let Some(s) = args.seed {
        c.seed = s;
    }
    if let Some(o) = &args.out {
        c.output_dir = o.clone();
    }
    if let Some(k) = args.top_k {
        c.span.top_k.set(c.pico, k);
    }
    if let Some(m) = args.max_span_len {
        c.span.max_span_len.set(c.pico, m);
    }
    if args.no_eliminate {
        c.span.eliminate_nested = false;
    }
    if let Some(m) = args.score_mode {
        c.span.score_mode = m;
    }
    if let Some(t) = args.threshold {
        c.span.threshold = t;
    }
    if let Some(b) = args.batch_size {
        c.span.batch_size = b;
    }
    let t = &mut c.scorer.train;
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = args.l2 {
        t.l2 = v;
    }
    if let Some(v) = args.feature_dim {
        t.feature_dim = v;
    }
    c.validate()?;
    Ok(c)
}

fn corpus_for(c: &RunConfig, split: Split) -> Result<Corpus> {
    let path = c.corpus.get(split).ok_or_else(|| {
        Error::Config(format!(
            "no {} corpus given (use --corpus or corpus.{} in the config)",
            split_name(split),
            split_name(split)
        ))
    })?;
    load_corpus(path, split)
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Dev => "dev",
        Split::Test => "test",
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_run_record(c: &RunConfig, hash: &str, name: &str) -> Result<PathBuf> {
    let path = c.output_dir.join(name);
    let record = RunRecord {
        config_hash: hash.to_string(),
        config: c.clone(),
    };
    write_text(&path, &(serde_json::to_string_pretty(&record)? + "\n"))?;
    Ok(path)
}

fn ingest(a: &IngestArgs, out: &mut dyn Write) -> Result<()> {
    let corpus = load_corpus(&a.input, Split::Train)?;
    save_corpus(&corpus, &a.output)?;
    let docs: std::collections::BTreeSet<&str> = corpus.sentences.iter().map(|s| s.doc_id.as_str()).collect();
    say(
        out,
        format!("{} documents, {} sentences -> {}", docs.len(), corpus.len(), a.output.display()),
    )
}

fn weaklabel(a: &WeaklabelArgs, out: &mut dyn Write) -> Result<()> {
    let c = resolve(&a.run, Split::Train, None)?;
    let hash = c.hash()?;
    let corpus = corpus_for(&c, Split::Train)?;
    let modes: Vec<LabelMode> = if a.all_modes { LabelMode::ALL.to_vec() } else { vec![c.label_mode] };
    let labels = weak_labels(&corpus, c.pico, &modes, Some(&hash))?;
    ensure_dir(&c.output_dir)?;
    let path = a.output.clone().unwrap_or_else(|| c.output_dir.join("labels.jsonl"));
    write_jsonl(&path, &labels)?;
    write_run_record(&c, &hash, "weaklabel.run.json")?;
    for mode in modes {
        let positive = labels.iter().filter(|l| l.mode == mode && l.label).count();
        say(out, format!("{mode}: {positive} of {} sentences positive", corpus.len()))?;
    }
    say(out, format!("labels -> {}", path.display()))
}

fn train(a: &RunArgs, out: &mut dyn Write) -> Result<()> {
    let c = resolve(a, Split::Train, None)?;
    let hash = c.hash()?;
    let labeled = labeled_sentences(&corpus_for(&c, Split::Train)?, c.pico, c.label_mode)?;
    let dev = match c.corpus.dev {
        Some(_) => Some(labeled_sentences(&corpus_for(&c, Split::Dev)?, c.pico, c.label_mode)?),
        None => None,
    };
    let model = train_baseline(&labeled, dev.as_deref(), c.pico, &c.train_config())?;

    let mut stored: serde_json::Value = serde_json::from_str(&model.to_json()?)?;
    stored["config_hash"] = serde_json::Value::String(hash.clone());
    ensure_dir(&c.output_dir)?;
    let path = a.model.clone().unwrap_or_else(|| c.output_dir.join("model.json"));
    write_text(&path, &(serde_json::to_string(&stored)? + "\n"))?;
    write_run_record(&c, &hash, "train.run.json")?;
    let positives = labeled.iter().filter(|(_, y)| *y).count();
    say(
        out,
        format!(
            "trained {} scorer on {} sentences ({} positive, {} labels) -> {}",
            c.pico,
            labeled.len(),
            positives,
            c.label_mode,
            path.display()
        ),
    )
}

fn build_scorer(c: &RunConfig) -> Result<ScorerHandle> {
    if let Some(ep) = &c.scorer.endpoint {
        let endpoint: Endpoint = ep.parse()?;
        return Ok(ScorerHandle::External(ExternalScorer::connect(endpoint, c.pico)?));
    }
    let path = c.scorer.model.as_ref().ok_or_else(|| {
        Error::Config(format!("no scorer: give --model, --scorer, scorer.model, scorer.endpoint or {SCORER_ENV}"))
    })?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let model = BaselineScorerModel::from_json(&text)?;
    if model.pico_type != c.pico {
        return Err(Error::Config(format!(
            "model {} was trained for {}, not {}",
            path.display(),
            model.pico_type,
            c.pico
        )));
    }
    Ok(ScorerHandle::Baseline(model))
}

fn detect(a: &RunArgs, env_scorer: Option<&str>, out: &mut dyn Write) -> Result<()> {
    let c = resolve(a, Split::Test, env_scorer)?;
    let hash = c.hash()?;
    let corpus = corpus_for(&c, Split::Test)?;
    let scorer = build_scorer(&c)?;
    let detections = detect_corpus(&corpus, &scorer, c.pico, &c.span, c.gate, Some(&hash))?;

    ensure_dir(&c.output_dir)?;
    let pred_path = c.output_dir.join("predictions.jsonl");
    write_jsonl(&pred_path, &detections.predictions)?;
    write_jsonl(c.output_dir.join("scored.jsonl"), &detections.dumps)?;
    write_run_record(&c, &hash, "detect.run.json")?;
    let positive = detections.predictions.iter().filter(|p| p.positive).count();
    let spans: usize = detections.predictions.iter().map(|p| p.spans.len()).sum();
    say(
        out,
        format!(
            "{} sentences, {positive} searched, {spans} spans -> {}",
            corpus.len(),
            pred_path.display()
        ),
    )
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn evaluate_cmd(a: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let corpus = match (&a.corpus, &a.config) {
        (Some(p), _) => load_corpus(p, Split::Test)?,
        (None, Some(cfg)) => corpus_for(&RunConfig::load(cfg)?, Split::Test)?,
        (None, None) => return Err(Error::Config("evaluate needs --corpus or --config".into())),
    };
    let predictions: Vec<PredictionRecord> = read_jsonl(&a.pred)?;
    let scored_path = a.scored.clone().or_else(|| {
        let p = sibling(&a.pred, "scored.jsonl");
        p.exists().then_some(p)
    });
    let dumps: Option<Vec<ScoredDumpRecord>> = scored_path.map(read_jsonl).transpose()?;
    let mut report = evaluate(&corpus, &predictions, dumps.as_deref())?;
    report.label = a.label.clone();

    let path = a.output.clone().unwrap_or_else(|| sibling(&a.pred, "report.json"));
    write_text(&path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    write!(out, "{}", render_table(std::slice::from_ref(&report))).map_err(|e| Error::io("<stdout>", e))?;
    say(out, format!("report -> {}", path.display()))
}

fn report_cmd(a: &ReportArgs, out: &mut dyn Write) -> Result<()> {
    let mut reports = Vec::new();
    for path in &a.reports {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut r: EvalReport = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if r.label.is_none() {
            r.label = Some(path.display().to_string());
        }
        reports.push(r);
    }
    if let Some(p) = &a.output {
        write_text(p, &(serde_json::to_string_pretty(&reports)? + "\n"))?;
    }
    write!(out, "{}", render_table(&reports)).map_err(|e| Error::io("<stdout>", e))
}

fn synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let config = SyntheticConfig {
        sentences: a.sentences,
        seed: a.seed,
        pico: a.pico,
        ..Default::default()
    };
    let corpus = generate(&config, Split::Train)?;
    save_corpus(&corpus, &a.output)?;
    say(out, format!("{} sentences -> {}", corpus.len(), a.output.display()))
}

fn conformance(a: &ConformanceArgs, env_scorer: Option<&str>, out: &mut dyn Write) -> Result<()> {
    let spec = a
        .scorer
        .as_deref()
        .or(env_scorer)
        .ok_or_else(|| Error::Config(format!("give --scorer or set {SCORER_ENV}")))?;
    let endpoint: Endpoint = spec.parse()?;
    let report = run_conformance(&endpoint, a.pico);
    write!(out, "{report}").map_err(|e| Error::io("<stdout>", e))?;
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Protocol(format!("{endpoint} failed conformance")))
    }
}
