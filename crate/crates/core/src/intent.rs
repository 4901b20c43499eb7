//! TOD/ODD intent detection.
//!
//! The reference classifier is logistic regression over normalized term
//! frequencies, trained with full-batch gradient descent on binary
//! cross-entropy. Other classifiers plug in through [`IntentClassifier`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Mode;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const MIN_EXAMPLES_PER_CLASS: usize = 10;
const FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IntentError {
    #[error("no {0} examples in the training sources")]
    MissingClass(Mode),
    #[error("need at least {MIN_EXAMPLES_PER_CLASS} examples per class, found {tod} TOD and {odd} ODD")]
    TooFewExamples { tod: usize, odd: usize },
    #[error("utterance is empty")]
    EmptyUtterance,
    #[error("unsupported detector file version {0}")]
    Version(u32),
    #[error("detector backend cannot be persisted")]
    NotPersistable,
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path, e: impl ToString) -> IntentError {
    IntentError::Io { path: path.to_path_buf(), message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentExample {
    pub utterance: String,
    pub label: Mode,
    pub source_corpus: String,
}

impl IntentExample {
    pub fn new(utterance: &str, label: Mode, source: &str) -> Self {
        IntentExample { utterance: utterance.to_string(), label, source_corpus: source.to_string() }
    }
}

/// Labeled utterances from one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSource {
    pub name: String,
    pub examples: Vec<(String, Mode)>,
}

/// Pools all sources and down-samples the majority class to the size of the
/// minority class. Survivors keep their original relative order.
pub fn build_balanced_mix(sources: &[LabeledSource], seed: u64) -> Result<Vec<IntentExample>, IntentError> {
    let all: Vec<IntentExample> = sources
        .iter()
        .flat_map(|s| {
            s.examples
                .iter()
                .filter(|(u, _)| !u.trim().is_empty())
                .map(move |(u, l)| IntentExample::new(u, *l, &s.name))
        })
        .collect();
    let tod: Vec<usize> = all.iter().enumerate().filter(|(_, e)| e.label == Mode::Tod).map(|(i, _)| i).collect();
    let odd: Vec<usize> = all.iter().enumerate().filter(|(_, e)| e.label == Mode::Odd).map(|(i, _)| i).collect();
    if tod.is_empty() {
        return Err(IntentError::MissingClass(Mode::Tod));
    }
    if odd.is_empty() {
        return Err(IntentError::MissingClass(Mode::Odd));
    }
    let n = tod.len().min(odd.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = Vec::with_capacity(2 * n);
    for mut class in [tod, odd] {
        if class.len() > n {
            class.shuffle(&mut rng);
            class.truncate(n);
        }
        keep.extend(class);
    }
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| all[i].clone()).collect())
}

/// Lowercased alphanumeric word pieces.
pub fn intent_tokens(utterance: &str) -> Vec<String> {
    utterance
        .split(|c: char| !c.is_alphanumeric() && c != '\'')
        .map(|t| t.trim_matches('\'').to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Produces `p(ODD | utterance)`.
pub trait IntentClassifier: Send + Sync {
    fn prob_odd(&self, utterance: &str) -> f64;
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logistic regression over term frequencies (counts divided by length).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearIntentModel {
    pub features: BTreeMap<String, usize>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearIntentModel {
    fn with_features(examples: &[IntentExample]) -> Self {
        let mut features = BTreeMap::new();
        for e in examples {
            for t in intent_tokens(&e.utterance) {
                let next = features.len();
                features.entry(t).or_insert(next);
            }
        }
        let weights = vec![0.0; features.len()];
        LinearIntentModel { features, weights, bias: 0.0 }
    }

    /// Sparse feature vector as (index, value) pairs.
    pub fn featurize(&self, utterance: &str) -> Vec<(usize, f64)> {
        let tokens = intent_tokens(utterance);
        if tokens.is_empty() {
            return Vec::new();
        }
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for t in &tokens {
            if let Some(&i) = self.features.get(t) {
                *counts.entry(i).or_default() += 1.0;
            }
        }
        let n = tokens.len() as f64;
        counts.into_iter().map(|(i, c)| (i, c / n)).collect()
    }

    pub fn logit(&self, utterance: &str) -> f64 {
        self.bias + self.featurize(utterance).iter().map(|&(i, v)| self.weights[i] * v).sum::<f64>()
    }

    /// Summed binary cross-entropy, with ODD as the positive class.
    pub fn loss(&self, examples: &[IntentExample]) -> f64 {
        examples
            .iter()
            .map(|e| {
                let p = sigmoid(self.logit(&e.utterance)).clamp(1e-15, 1.0 - 1e-15);
                if e.label == Mode::Odd {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum()
    }
}

impl IntentClassifier for LinearIntentModel {
    fn prob_odd(&self, utterance: &str) -> f64 {
        sigmoid(self.logit(utterance))
    }
}

/// Always returns the same probability.
#[derive(Debug, Clone, Copy)]
pub struct ConstantClassifier(pub f64);

impl IntentClassifier for ConstantClassifier {
    fn prob_odd(&self, _utterance: &str) -> f64 {
        self.0
    }
}

/// ODD iff the utterance contains one of the marker words.
#[derive(Debug, Clone)]
pub struct KeywordClassifier {
    pub odd_markers: Vec<String>,
}

impl KeywordClassifier {
    pub fn new(markers: &[&str]) -> Self {
        KeywordClassifier { odd_markers: markers.iter().map(|m| m.to_lowercase()).collect() }
    }
}

impl IntentClassifier for KeywordClassifier {
    fn prob_odd(&self, utterance: &str) -> f64 {
        let toks = intent_tokens(utterance);
        if self.odd_markers.iter().any(|m| toks.iter().any(|t| t == m)) {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Fraction of each class held out for evaluation.
    pub heldout_fraction: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { epochs: 300, learning_rate: 2.0, l2: 1e-4, heldout_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorMetrics {
    pub heldout_accuracy: f64,
    pub heldout_size: usize,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
}

#[derive(Clone)]
pub struct IntentDetector {
    backend: Arc<dyn IntentClassifier>,
    linear: Option<LinearIntentModel>,
    pub threshold: f64,
    pub metrics: Option<DetectorMetrics>,
}

impl std::fmt::Debug for IntentDetector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IntentDetector")
            .field("threshold", &self.threshold)
            .field("linear", &self.linear.is_some())
            .field("metrics", &self.metrics)
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct DetectorFile {
    version: u32,
    threshold: f64,
    metrics: Option<DetectorMetrics>,
    model: LinearIntentModel,
}

impl IntentDetector {
    pub fn from_classifier(backend: Arc<dyn IntentClassifier>) -> Self {
        IntentDetector { backend, linear: None, threshold: DEFAULT_THRESHOLD, metrics: None }
    }

    pub fn from_linear(model: LinearIntentModel) -> Self {
        IntentDetector {
            backend: Arc::new(model.clone()),
            linear: Some(model),
            threshold: DEFAULT_THRESHOLD,
            metrics: None,
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold.clamp(0.0, 1.0);
        self
    }

    pub fn linear(&self) -> Option<&LinearIntentModel> {
        self.linear.as_ref()
    }

    /// `(label, p(ODD))`; ODD iff the probability reaches the threshold.
    pub fn detect(&self, utterance: &str) -> Result<(Mode, f64), IntentError> {
        if utterance.trim().is_empty() {
            return Err(IntentError::EmptyUtterance);
        }
        let p = self.backend.prob_odd(utterance).clamp(0.0, 1.0);
        Ok((if p >= self.threshold { Mode::Odd } else { Mode::Tod }, p))
    }

    pub fn accuracy(&self, examples: &[IntentExample]) -> f64 {
        if examples.is_empty() {
            return 0.0;
        }
        let hits = examples.iter().filter(|e| self.detect(&e.utterance).map(|(l, _)| l).ok() == Some(e.label)).count();
        hits as f64 / examples.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<(), IntentError> {
        let model = self.linear.clone().ok_or(IntentError::NotPersistable)?;
        let file = DetectorFile { version: FILE_VERSION, threshold: self.threshold, metrics: self.metrics, model };
        fs::write(path, serde_json::to_string_pretty(&file).expect("detector serializes")).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, IntentError> {
        let raw = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let file: DetectorFile = serde_json::from_str(&raw).map_err(|e| io_err(path, e))?;
        if file.version != FILE_VERSION {
            return Err(IntentError::Version(file.version));
        }
        let mut d = IntentDetector::from_linear(file.model).with_threshold(file.threshold);
        d.metrics = file.metrics;
        Ok(d)
    }
}

/// Stratified train/held-out split; each class contributes
/// `round(fraction * n_class)` held-out examples chosen with `seed`.
pub fn stratified_split(
    examples: &[IntentExample],
    fraction: f64,
    seed: u64,
) -> (Vec<IntentExample>, Vec<IntentExample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = vec![false; examples.len()];
    for label in [Mode::Tod, Mode::Odd] {
        let mut idx: Vec<usize> =
            examples.iter().enumerate().filter(|(_, e)| e.label == label).map(|(i, _)| i).collect();
        idx.shuffle(&mut rng);
        let k = (fraction * idx.len() as f64).round() as usize;
        for &i in idx.iter().take(k) {
            held[i] = true;
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (e, h) in examples.iter().zip(held) {
        if h {
            test.push(e.clone());
        } else {
            train.push(e.clone());
        }
    }
    (train, test)
}

/// Fits the linear detector on a balanced mix.
pub fn train_detector(
    examples: &[IntentExample],
    config: &DetectorConfig,
    seed: u64,
) -> Result<IntentDetector, IntentError> {
    let tod = examples.iter().filter(|e| e.label == Mode::Tod).count();
    let odd = examples.len() - tod;
    if tod == 0 {
        return Err(IntentError::MissingClass(Mode::Tod));
    }
    if odd == 0 {
        return Err(IntentError::MissingClass(Mode::Odd));
    }
    if tod < MIN_EXAMPLES_PER_CLASS || odd < MIN_EXAMPLES_PER_CLASS {
        return Err(IntentError::TooFewExamples { tod, odd });
    }
    let (train, heldout) = stratified_split(examples, config.heldout_fraction, seed);
    let mut model = LinearIntentModel::with_features(&train);
    let feats: Vec<(Vec<(usize, f64)>, f64)> =
        train.iter().map(|e| (model.featurize(&e.utterance), if e.label == Mode::Odd { 1.0 } else { 0.0 })).collect();
    let initial = model.loss(&train);
    let n = train.len() as f64;
    for _ in 0..config.epochs {
        let mut gw = vec![0.0; model.weights.len()];
        let mut gb = 0.0;
        for (x, y) in &feats {
            let z = model.bias + x.iter().map(|&(i, v)| model.weights[i] * v).sum::<f64>();
            let err = sigmoid(z) - y;
            gb += err;
            for &(i, v) in x {
                gw[i] += err * v;
            }
        }
        for (w, g) in model.weights.iter_mut().zip(&gw) {
            *w -= config.learning_rate * (g / n + config.l2 * *w);
        }
        model.bias -= config.learning_rate * gb / n;
    }
    let final_loss = model.loss(&train);
    let mut detector = IntentDetector::from_linear(model);
    let heldout_accuracy = detector.accuracy(&heldout);
    detector.metrics = Some(DetectorMetrics {
        heldout_accuracy,
        heldout_size: heldout.len(),
        initial_train_loss: initial,
        final_train_loss: final_loss,
    });
    Ok(detector)
}

/// One source in a training-mix manifest. With `label` set, `path` is a text
/// file with one utterance per line; otherwise it is JSONL of
/// `{"utterance": ..., "label": "tod"|"odd"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSource {
    pub name: String,
    pub path: PathBuf,
    #[serde(default)]
    pub label: Option<Mode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixManifest {
    pub seed: u64,
    pub sources: Vec<MixSource>,
}

#[derive(Deserialize)]
struct LabeledLine {
    utterance: String,
    label: Mode,
}

impl MixManifest {
    pub fn load(path: &Path) -> Result<Self, IntentError> {
        let raw = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&raw).map_err(|e| io_err(path, e))
    }

    /// Reads every source, resolving relative paths against `base`.
    pub fn read_sources(&self, base: &Path) -> Result<Vec<LabeledSource>, IntentError> {
        self.sources
            .iter()
            .map(|s| {
                let path = if s.path.is_absolute() { s.path.clone() } else { base.join(&s.path) };
                let raw = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
                let mut examples = Vec::new();
                for (i, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    match s.label {
                        Some(label) => examples.push((line.trim().to_string(), label)),
                        None => {
                            let parsed: LabeledLine = serde_json::from_str(line)
                                .map_err(|e| io_err(&path, format!("line {}: {e}", i + 1)))?;
                            examples.push((parsed.utterance, parsed.label));
                        }
                    }
                }
                Ok(LabeledSource { name: s.name.clone(), examples })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn source(name: &str, n: usize, label: Mode, marker: &str) -> LabeledSource {
        LabeledSource {
            name: name.into(),
            examples: (0..n).map(|i| (format!("utterance {i} {marker} word{}", i % 7), label)).collect(),
        }
    }

    #[test]
    fn balance_downsamples_majority() {
        let mix =
            build_balanced_mix(&[source("tod", 300, Mode::Tod, "book"), source("odd", 100, Mode::Odd, "love")], 1)
                .unwrap();
        assert_eq!(mix.len(), 200);
        assert_eq!(mix.iter().filter(|e| e.label == Mode::Odd).count(), 100);
        let again =
            build_balanced_mix(&[source("tod", 300, Mode::Tod, "book"), source("odd", 100, Mode::Odd, "love")], 1)
                .unwrap();
        assert_eq!(mix, again);
    }

    #[test]
    fn balanced_input_is_unchanged() {
        let srcs = [source("a", 50, Mode::Tod, "book"), source("b", 50, Mode::Odd, "love")];
        let mix = build_balanced_mix(&srcs, 3).unwrap();
        let expected: Vec<IntentExample> =
            srcs.iter().flat_map(|s| s.examples.iter().map(|(u, l)| IntentExample::new(u, *l, &s.name))).collect();
        assert_eq!(mix, expected);
        assert!(matches!(build_balanced_mix(&srcs[..1], 0), Err(IntentError::MissingClass(Mode::Odd))));
    }

    #[test]
    fn separable_data_is_learned() {
        let mix =
            build_balanced_mix(&[source("t", 40, Mode::Tod, "book"), source("o", 40, Mode::Odd, "lovely")], 0).unwrap();
        let det = train_detector(&mix, &DetectorConfig::default(), 5).unwrap();
        let m = det.metrics.unwrap();
        assert_eq!(m.heldout_accuracy, 1.0);
        assert!(m.final_train_loss < m.initial_train_loss);
        let again = train_detector(&mix, &DetectorConfig::default(), 5).unwrap();
        assert_eq!(again.metrics.unwrap().heldout_accuracy, m.heldout_accuracy);
        assert_eq!(det.detect("utterance 3 lovely").unwrap().0, Mode::Odd);
    }

    #[test]
    fn degenerate_training_rejected() {
        let tiny =
            build_balanced_mix(&[source("t", 5, Mode::Tod, "book"), source("o", 5, Mode::Odd, "love")], 0).unwrap();
        assert!(matches!(
            train_detector(&tiny, &DetectorConfig::default(), 0),
            Err(IntentError::TooFewExamples { .. })
        ));
        let one_class: Vec<IntentExample> =
            (0..20).map(|i| IntentExample::new(&format!("x {i}"), Mode::Tod, "t")).collect();
        assert!(matches!(
            train_detector(&one_class, &DetectorConfig::default(), 0),
            Err(IntentError::MissingClass(Mode::Odd))
        ));
    }

    #[test]
    fn threshold_boundaries_and_empty_input() {
        let det = IntentDetector::from_classifier(Arc::new(ConstantClassifier(0.2))).with_threshold(0.0);
        assert_eq!(det.detect("book a train").unwrap().0, Mode::Odd);
        assert!(matches!(det.detect("  "), Err(IntentError::EmptyUtterance)));
    }

    #[test]
    fn loss_matches_bce_oracle() {
        let model = LinearIntentModel {
            features: [("train", 0), ("love", 1), ("book", 2)].into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            weights: vec![-1.3, 2.1, -0.4],
            bias: 0.15,
        };
        let batch = [
            IntentExample::new("book a train", Mode::Tod, "x"),
            IntentExample::new("i love it", Mode::Odd, "x"),
            IntentExample::new("love love train", Mode::Odd, "x"),
            IntentExample::new("nothing known", Mode::Tod, "x"),
            IntentExample::new("Train!", Mode::Odd, "x"),
        ];
        // Hand-expanded features: tf = count / token count.
        let logits = [
            0.15 + (-1.3 / 3.0) + (-0.4 / 3.0),
            0.15 + 2.1 / 3.0,
            0.15 + 2.0 * 2.1 / 3.0 - 1.3 / 3.0,
            0.15,
            0.15 - 1.3,
        ];
        let labels = [0.0, 1.0, 1.0, 0.0, 1.0];
        let oracle: f64 = logits
            .iter()
            .zip(labels)
            .map(|(z, y): (&f64, f64)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        assert!((model.loss(&batch) - oracle).abs() < 1e-8);
    }

    #[test]
    fn persistence_round_trip() {
        let mix =
            build_balanced_mix(&[source("t", 20, Mode::Tod, "book"), source("o", 20, Mode::Odd, "love")], 0).unwrap();
        let det = train_detector(&mix, &DetectorConfig::default(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.json");
        det.save(&path).unwrap();
        let back = IntentDetector::load(&path).unwrap();
        assert_eq!(back.linear(), det.linear());
        assert_eq!(back.detect("love it").unwrap(), det.detect("love it").unwrap());
    }

    proptest! {
        #[test]
        fn mix_is_exactly_balanced(tod in 1usize..60, odd in 1usize..60, seed in 0u64..1000) {
            let mix = build_balanced_mix(&[source("t", tod, Mode::Tod, "a"), source("o", odd, Mode::Odd, "b")], seed).unwrap();
            let n_odd = mix.iter().filter(|e| e.label == Mode::Odd).count();
            prop_assert_eq!(n_odd * 2, mix.len());
            prop_assert_eq!(n_odd, tod.min(odd));
        }
    }
}
