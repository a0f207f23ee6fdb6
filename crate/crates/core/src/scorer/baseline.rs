//! Linear two-class scorer over hashed, lowercased unigram and bigram counts,
//! trained with mini-batch gradient descent on the cross-entropy loss.

use std::collections::BTreeMap;
use std::hash::Hasher;

use fnv::FnvHasher;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_request, ScoreRequest, ScoreResult, SentenceScorer};
use crate::corpus::{PicoType, Span};
use crate::error::{Error, Result};

pub const DEFAULT_FEATURE_DIM: usize = 1 << 18;
pub const DEFAULT_MASK_TOKEN: &str = "[MASK]";
pub const DEFAULT_MAX_TOKENS: usize = 512;

/// Sorted `(feature index, count)` pairs without duplicates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseFeatures(pub Vec<(u32, f64)>);

impl SparseFeatures {
    fn dot(&self, weights: &[f64]) -> f64 {
        self.0.iter().map(|&(k, v)| weights[k as usize] * v).sum()
    }
}

// 64-bit FNV-1a over the parts joined by 0x1f, with the seed folded into the
// offset basis.
fn fnv1a(seed: u64, parts: &[&str]) -> u64 {
    let mut h = FnvHasher::with_key(0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    for (k, part) in parts.iter().enumerate() {
        if k > 0 {
            h.write_u8(0x1f);
        }
        h.write(part.as_bytes());
    }
    h.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineScorerModel {
    pub pico_type: PicoType,
    pub feature_dim: usize,
    pub pos_weights: Vec<f64>,
    pub neg_weights: Vec<f64>,
    pub pos_bias: f64,
    pub neg_bias: f64,
    pub hash_seed: u64,
    pub mask_token: String,
    /// Tokens beyond this length are dropped before featurization.
    pub max_tokens: usize,
}

impl BaselineScorerModel {
    pub fn zeros(pico_type: PicoType, feature_dim: usize, hash_seed: u64) -> Self {
        BaselineScorerModel {
            pico_type,
            feature_dim,
            pos_weights: vec![0.0; feature_dim],
            neg_weights: vec![0.0; feature_dim],
            pos_bias: 0.0,
            neg_bias: 0.0,
            hash_seed,
            mask_token: DEFAULT_MASK_TOKEN.to_string(),
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn effective_length(&self, n_tokens: usize) -> usize {
        n_tokens.min(self.max_tokens)
    }

    /// Features of `tokens` after masking and truncation.
    pub fn featurize<S: AsRef<str>>(&self, tokens: &[S], mask: Option<Span>) -> SparseFeatures {
        let n = self.effective_length(tokens.len());
        let mask_token = self.mask_token.to_lowercase();
        let words: Vec<String> = tokens[..n]
            .iter()
            .enumerate()
            .map(|(k, t)| match mask {
                Some(m) if m.indices().contains(&k) => mask_token.clone(),
                _ => t.as_ref().to_lowercase(),
            })
            .collect();

        let dim = self.feature_dim as u64;
        let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
        for w in &words {
            let k = (fnv1a(self.hash_seed, &["u", w]) % dim) as u32;
            *counts.entry(k).or_default() += 1.0;
        }
        for pair in words.windows(2) {
            let k = (fnv1a(self.hash_seed, &["b", &pair[0], &pair[1]]) % dim) as u32;
            *counts.entry(k).or_default() += 1.0;
        }
        SparseFeatures(counts.into_iter().collect())
    }

    pub fn scores(&self, features: &SparseFeatures) -> (f64, f64) {
        (
            features.dot(&self.pos_weights) + self.pos_bias,
            features.dot(&self.neg_weights) + self.neg_bias,
        )
    }

    pub fn score(&self, tokens: &[String], mask: Option<Span>) -> Result<ScoreResult> {
        check_request(&ScoreRequest { tokens, mask })?;
        let (pos, neg) = self.scores(&self.featurize(tokens, mask));
        Ok(ScoreResult::from_scores(pos, neg, self.effective_length(tokens.len())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&StoredModel::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let stored: StoredModel = serde_json::from_str(s)?;
        stored.try_into()
    }

    fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.pos_weights.len() != self.feature_dim || self.neg_weights.len() != self.feature_dim {
            return Err(Error::Config("weight vectors do not match feature_dim".into()));
        }
        let finite = self
            .pos_weights
            .iter()
            .chain(&self.neg_weights)
            .chain([&self.pos_bias, &self.neg_bias])
            .all(|w| w.is_finite());
        if !finite {
            return Err(Error::Config("model has non-finite parameters".into()));
        }
        Ok(())
    }
}

impl SentenceScorer for BaselineScorerModel {
    fn pico_type(&self) -> Option<PicoType> {
        Some(self.pico_type)
    }

    fn score_batch(&self, requests: &[ScoreRequest<'_>]) -> Result<Vec<ScoreResult>> {
        requests.iter().map(|r| self.score(r.tokens, r.mask)).collect()
    }
}

// Weights are stored sparsely: only non-zero coordinates are written.
#[derive(Serialize, Deserialize)]
struct StoredModel {
    pico_type: PicoType,
    feature_dim: usize,
    hash_seed: u64,
    mask_token: String,
    max_tokens: usize,
    bias: [f64; 2],
    pos_weights: Vec<(u32, f64)>,
    neg_weights: Vec<(u32, f64)>,
}

fn sparse(w: &[f64]) -> Vec<(u32, f64)> {
    w.iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(k, v)| (k as u32, *v))
        .collect()
}

impl From<&BaselineScorerModel> for StoredModel {
    fn from(m: &BaselineScorerModel) -> Self {
        StoredModel {
            pico_type: m.pico_type,
            feature_dim: m.feature_dim,
            hash_seed: m.hash_seed,
            mask_token: m.mask_token.clone(),
            max_tokens: m.max_tokens,
            bias: [m.pos_bias, m.neg_bias],
            pos_weights: sparse(&m.pos_weights),
            neg_weights: sparse(&m.neg_weights),
        }
    }
}

impl TryFrom<StoredModel> for BaselineScorerModel {
    type Error = Error;

    fn try_from(s: StoredModel) -> Result<Self> {
        let mut m = BaselineScorerModel::zeros(s.pico_type, s.feature_dim, s.hash_seed);
        m.mask_token = s.mask_token;
        m.max_tokens = s.max_tokens;
        [m.pos_bias, m.neg_bias] = s.bias;
        for (dst, src) in [(&mut m.pos_weights, s.pos_weights), (&mut m.neg_weights, s.neg_weights)] {
            for (k, v) in src {
                let slot = dst
                    .get_mut(k as usize)
                    .ok_or_else(|| Error::Config(format!("weight index {k} out of range")))?;
                *slot = v;
            }
        }
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
    pub feature_dim: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 0.2,
            l2: 1e-4,
            seed: 13,
            feature_dim: DEFAULT_FEATURE_DIM,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub pos_weights: Vec<f64>,
    pub neg_weights: Vec<f64>,
    pub pos_bias: f64,
    pub neg_bias: f64,
}

/// Mean cross-entropy over `examples` plus `l2 / 2 * |W|^2` (biases are not
/// regularized), together with its exact gradient.
pub fn objective_and_gradient(
    model: &BaselineScorerModel,
    examples: &[(SparseFeatures, bool)],
    l2: f64,
) -> (f64, Gradient) {
    let dim = model.feature_dim;
    let mut grad = Gradient {
        pos_weights: model.pos_weights.iter().map(|w| l2 * w).collect(),
        neg_weights: model.neg_weights.iter().map(|w| l2 * w).collect(),
        pos_bias: 0.0,
        neg_bias: 0.0,
    };
    debug_assert_eq!(grad.pos_weights.len(), dim);
    let n = examples.len().max(1) as f64;
    let mut loss = 0.0;
    for (features, y) in examples {
        let (pos, neg) = model.scores(features);
        let (loss_k, d_pos, d_neg) = example_loss(pos, neg, *y);
        loss += loss_k;
        for &(k, v) in &features.0 {
            grad.pos_weights[k as usize] += d_pos * v / n;
            grad.neg_weights[k as usize] += d_neg * v / n;
        }
        grad.pos_bias += d_pos / n;
        grad.neg_bias += d_neg / n;
    }
    let reg: f64 = model
        .pos_weights
        .iter()
        .chain(&model.neg_weights)
        .map(|w| w * w)
        .sum();
    (loss / n + 0.5 * l2 * reg, grad)
}

/// Cross-entropy `-log p(y)` and its derivatives with respect to the two scores.
fn example_loss(pos: f64, neg: f64, y: bool) -> (f64, f64, f64) {
    let p = super::softmax_positive(pos, neg);
    // log(1 + exp(x)) without overflow
    let softplus = |x: f64| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    let loss = if y { softplus(neg - pos) } else { softplus(pos - neg) };
    let target = if y { 1.0 } else { 0.0 };
    (loss, p - target, target - p)
}

fn mean_loss(model: &BaselineScorerModel, examples: &[(SparseFeatures, bool)]) -> f64 {
    let total: f64 = examples
        .iter()
        .map(|(f, y)| {
            let (pos, neg) = model.scores(f);
            example_loss(pos, neg, *y).0
        })
        .sum();
    total / examples.len().max(1) as f64
}

/// Trains a baseline scorer on `(tokens, label)` pairs.
///
/// When `dev` is given, the parameters from the epoch with the lowest dev
/// loss are returned; otherwise those of the final epoch.
pub fn train_baseline(
    labeled: &[(Vec<String>, bool)],
    dev: Option<&[(Vec<String>, bool)]>,
    pico_type: PicoType,
    config: &TrainConfig,
) -> Result<BaselineScorerModel> {
    let positives = labeled.iter().filter(|(_, y)| *y).count();
    if positives == 0 || positives == labeled.len() {
        return Err(Error::Training(format!(
            "need both classes, got {positives} positive of {}",
            labeled.len()
        )));
    }
    if config.feature_dim == 0 || config.batch_size == 0 {
        return Err(Error::Config("feature_dim and batch_size must be positive".into()));
    }
    if !(config.learning_rate.is_finite() && config.l2.is_finite() && config.l2 >= 0.0) {
        return Err(Error::Config("learning_rate and l2 must be finite, l2 >= 0".into()));
    }

    let mut model = BaselineScorerModel::zeros(pico_type, config.feature_dim, config.seed);
    let featurize = |data: &[(Vec<String>, bool)]| -> Vec<(SparseFeatures, bool)> {
        data.iter()
            .filter(|(t, _)| !t.is_empty())
            .map(|(t, y)| (model.featurize(t, None), *y))
            .collect()
    };
    let train = featurize(labeled);
    let dev = dev.map(featurize).filter(|d| !d.is_empty());

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, BaselineScorerModel)> = None;
    let lr = config.learning_rate;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let shrink = 1.0 - lr * config.l2;
            model.pos_weights.iter_mut().for_each(|w| *w *= shrink);
            model.neg_weights.iter_mut().for_each(|w| *w *= shrink);
            let scale = lr / batch.len() as f64;
            let mut bias_step = (0.0, 0.0);
            // Scores are computed before any update in this batch.
            let deltas: Vec<(f64, f64)> = batch
                .iter()
                .map(|&i| {
                    let (f, y) = &train[i];
                    let (pos, neg) = model.scores(f);
                    let (_, d_pos, d_neg) = example_loss(pos, neg, *y);
                    (d_pos, d_neg)
                })
                .collect();
            for (&i, (d_pos, d_neg)) in batch.iter().zip(deltas) {
                for &(k, v) in &train[i].0 .0 {
                    model.pos_weights[k as usize] -= scale * d_pos * v;
                    model.neg_weights[k as usize] -= scale * d_neg * v;
                }
                bias_step.0 += scale * d_pos;
                bias_step.1 += scale * d_neg;
            }
            model.pos_bias -= bias_step.0;
            model.neg_bias -= bias_step.1;
        }

        let loss = mean_loss(&model, &train);
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, loss });
        }
        if let Some(dev) = &dev {
            let dev_loss = mean_loss(&model, dev);
            if !dev_loss.is_finite() {
                return Err(Error::Divergence { epoch, loss: dev_loss });
            }
            if best.as_ref().is_none_or(|(b, _)| dev_loss < *b) {
                best = Some((dev_loss, model.clone()));
            }
        }
    }
    Ok(best.map(|(_, m)| m).unwrap_or(model))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn toy_set() -> Vec<(Vec<String>, bool)> {
        let fillers = [
            "the study was conducted in spring",
            "data were analysed with standard methods",
            "results are reported below",
            "a follow up visit was scheduled",
            "outcomes were measured at baseline",
            "the protocol was approved",
            "this trial used a crossover design",
            "we describe the statistical plan",
            "the sample size was calculated",
            "randomization used sealed envelopes",
        ];
        let mut out = Vec::new();
        for f in fillers {
            out.push((words(&format!("{f} and patients were enrolled")), true));
            out.push((words(f), false));
        }
        out
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            learning_rate: 0.5,
            feature_dim: 1 << 12,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_weights_score_is_bias() {
        let mut m = BaselineScorerModel::zeros(PicoType::Outcome, 16, 0);
        m.pos_bias = 0.3;
        m.neg_bias = -0.2;
        let r = m.score(&words("any tokens at all"), None).unwrap();
        assert_eq!(r.positive_score, 0.3);
        assert_eq!(r.negative_score, -0.2);
        assert_eq!(r.probability, super::super::softmax_positive(0.3, -0.2));
        assert_eq!(r.effective_length, 4);
    }

    #[test]
    fn separable_toy_set_reaches_full_accuracy() {
        let data = toy_set();
        assert_eq!(data.len(), 20);
        let model = train_baseline(&data, None, PicoType::Population, &small_config()).unwrap();
        for (tokens, y) in &data {
            let r = model.score(tokens, None).unwrap();
            assert_eq!(r.probability >= 0.5, *y, "{tokens:?} p={}", r.probability);
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let config = TrainConfig { epochs: 0, ..small_config() };
        let m = train_baseline(&toy_set(), None, PicoType::Population, &config).unwrap();
        assert!(m.pos_weights.iter().chain(&m.neg_weights).all(|w| *w == 0.0));
        assert_eq!((m.pos_bias, m.neg_bias), (0.0, 0.0));
    }

    #[test]
    fn single_class_is_rejected() {
        let data: Vec<_> = toy_set().into_iter().filter(|(_, y)| *y).collect();
        let err = train_baseline(&data, None, PicoType::Population, &small_config()).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
    }

    #[test]
    fn huge_learning_rate_diverges_with_epoch() {
        let config = TrainConfig { learning_rate: 1e308, l2: 0.0, ..small_config() };
        let err = train_baseline(&toy_set(), None, PicoType::Population, &config).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 1, .. }), "{err}");
    }

    #[test]
    fn dev_selection_picks_a_trained_epoch() {
        let data = toy_set();
        let m = train_baseline(&data, Some(&data[..6]), PicoType::Population, &small_config()).unwrap();
        assert!(m.pos_weights.iter().any(|w| *w != 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let a = train_baseline(&toy_set(), None, PicoType::Population, &small_config()).unwrap();
        let b = train_baseline(&toy_set(), None, PicoType::Population, &small_config()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn json_round_trip_preserves_scores() {
        let m = train_baseline(&toy_set(), None, PicoType::Population, &small_config()).unwrap();
        let back = BaselineScorerModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        let t = words("patients were enrolled today");
        assert_eq!(m.score(&t, None).unwrap(), back.score(&t, None).unwrap());
    }

    #[test]
    fn masking_keyword_lowers_probability() {
        let m = train_baseline(&toy_set(), None, PicoType::Population, &small_config()).unwrap();
        let t = words("the sample was small and patients were enrolled");
        let full = m.score(&t, None).unwrap();
        let masked = m.score(&t, Some(Span::new(5, 8))).unwrap();
        assert!(masked.probability < full.probability);
    }

    #[test]
    fn mask_locality() {
        let m = BaselineScorerModel::zeros(PicoType::Population, 1 << 16, 3);
        let t = words("a b c d e f g");
        let base: BTreeMap<u32, f64> = m.featurize(&t, None).0.into_iter().collect();
        let masked: BTreeMap<u32, f64> = m.featurize(&t, Some(Span::new(2, 4))).0.into_iter().collect();
        // only features touching tokens 1..=4 may differ
        let far = m.featurize(&words("a b"), None).0;
        let far_tail = m.featurize(&words("e f g"), None).0;
        for (k, v) in far.iter().chain(far_tail.iter()) {
            assert_eq!(base.get(k), Some(v));
            assert_eq!(masked.get(k), Some(v));
        }
    }

    #[test]
    fn truncates_to_max_tokens() {
        let mut m = BaselineScorerModel::zeros(PicoType::Population, 64, 0);
        m.max_tokens = 3;
        let r = m.score(&words("a b c d e"), None).unwrap();
        assert_eq!(r.effective_length, 3);
        assert_eq!(m.featurize(&words("a b c d e"), None), m.featurize(&words("a b c"), None));
    }

    #[test]
    fn feature_hash_is_fnv1a() {
        // published 64-bit FNV-1a vectors; seed 0 keeps the standard basis
        assert_eq!(fnv1a(0, &["a"]), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a(0, &["foobar"]), 0x8594_4171_f739_67e8);
        assert_ne!(fnv1a(1, &["a"]), fnv1a(0, &["a"]));
        assert_ne!(fnv1a(0, &["ab", "c"]), fnv1a(0, &["a", "bc"]));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let data = toy_set();
        let mut m = train_baseline(&data, None, PicoType::Population, &TrainConfig { epochs: 2, ..small_config() }).unwrap();
        m.pos_bias = 0.1;
        let examples: Vec<_> = data.iter().map(|(t, y)| (m.featurize(t, None), *y)).collect();
        let l2 = 0.01;
        let (_, grad) = objective_and_gradient(&m, &examples, l2);
        let coords: Vec<u32> = examples[0].0 .0.iter().map(|(k, _)| *k).take(5).collect();
        let h = 1e-5;
        for k in coords {
            let mut plus = m.clone();
            plus.pos_weights[k as usize] += h;
            let mut minus = m.clone();
            minus.pos_weights[k as usize] -= h;
            let numeric = (objective_and_gradient(&plus, &examples, l2).0
                - objective_and_gradient(&minus, &examples, l2).0)
                / (2.0 * h);
            let analytic = grad.pos_weights[k as usize];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
            assert!(rel <= 1e-4, "coord {k}: {analytic} vs {numeric}");
        }
    }
}
