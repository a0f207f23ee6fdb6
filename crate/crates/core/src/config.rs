//! Run configuration: the full set of inputs that determine a run's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{PicoType, Split};
use crate::engine::SpanConfig;
use crate::error::{Error, Result};
use crate::inference::Gate;
use crate::labels::LabelMode;
use crate::scorer::TrainConfig;

pub const SCORER_ENV: &str = "SENT2SPAN_SCORER";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusPaths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

impl CorpusPaths {
    pub fn get(&self, split: Split) -> Option<&Path> {
        match split {
            Split::Train => self.train.as_deref(),
            Split::Dev => self.dev.as_deref(),
            Split::Test => self.test.as_deref(),
        }
    }

    pub fn set(&mut self, split: Split, path: PathBuf) {
        match split {
            Split::Train => self.train = Some(path),
            Split::Dev => self.dev = Some(path),
            Split::Test => self.test = Some(path),
        }
    }
}

/// Either a trained baseline model file or an external scorer endpoint.
/// The endpoint wins when both are set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerSpec {
    pub model: Option<PathBuf>,
    pub endpoint: Option<String>,
    /// Baseline training parameters; the run seed replaces `train.seed`.
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: CorpusPaths,
    pub pico: PicoType,
    pub label_mode: LabelMode,
    pub gate: Gate,
    pub span: SpanConfig,
    pub scorer: ScorerSpec,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: CorpusPaths::default(),
            pico: PicoType::Population,
            label_mode: LabelMode::Minor,
            gate: Gate::Predicted,
            span: SpanConfig::default(),
            scorer: ScorerSpec::default(),
            seed: 13,
            output_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.scorer.train.clone()
        }
    }

    /// SHA-256 over the compact JSON form, excluding `output_dir` so that the
    /// same run written to two places carries the same hash.
    pub fn hash(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("output_dir");
        }
        let digest = Sha256::digest(serde_json::to_string(&value)?.as_bytes());
        Ok(hex::encode(digest))
    }

    pub fn validate(&self) -> Result<()> {
        self.span.validate()?;
        let t = &self.scorer.train;
        if t.feature_dim == 0 || t.batch_size == 0 {
            return Err(Error::Config("feature_dim and batch_size must be positive".into()));
        }
        if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) || !(t.l2.is_finite() && t.l2 >= 0.0) {
            return Err(Error::Config("learning_rate must be positive and l2 non-negative".into()));
        }
        Ok(())
    }
}

/// The file written next to run outputs: the configuration and its hash.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub config: RunConfig,
}
