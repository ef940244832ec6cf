//! Linear gender probe over final-layer noun representations.
//!
//! The probe is a two-class logistic regression (softmax over feminine and
//! masculine) trained by full-batch gradient descent with an L2 penalty on
//! the weights. It remembers the noun types it was trained on and refuses
//! to evaluate on any of them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, GoldGender, NounAnnotation};
use crate::model::{decode_container, encode_container, write_container_file, Encoder, ModelError};
use crate::seed;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("annotation {annotation} of sentence {sentence}: token {index} is `{found}`, expected `{expected}`")]
    Inconsistent { sentence: usize, annotation: usize, index: usize, expected: String, found: String },
    #[error("training item {0} has no gender label")]
    Unlabeled(usize),
    #[error("training set contains only {0} items")]
    SingleClass(&'static str),
    #[error("non-finite probe loss at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("empty feature set")]
    Empty,
    #[error("feature dimension {found} does not match probe dimension {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("evaluation nouns overlap the probe's training nouns: {}", .0.join(", "))]
    TrainingOverlap(Vec<String>),
    #[error("invalid probe configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// The two probe classes. Index 0 is feminine, 1 masculine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Feminine,
    Masculine,
}

impl Class {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_gold(g: GoldGender) -> Option<Class> {
        match g {
            GoldGender::Feminine => Some(Class::Feminine),
            GoldGender::Masculine => Some(Class::Masculine),
            GoldGender::None => None,
        }
    }

    pub fn flipped(self) -> Class {
        match self {
            Class::Feminine => Class::Masculine,
            Class::Masculine => Class::Feminine,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub vector: Vec<f32>,
    pub label: Option<Class>,
    pub annotation: NounAnnotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub items: Vec<Feature>,
}

impl FeatureSet {
    pub fn new(dim: usize, items: Vec<Feature>) -> Result<Self, ProbeError> {
        if let Some(f) = items.iter().find(|f| f.vector.len() != dim) {
            return Err(ProbeError::Dimension { expected: dim, found: f.vector.len() });
        }
        Ok(Self { dim, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn noun_types(&self) -> BTreeSet<&str> {
        self.items.iter().map(|f| f.annotation.surface.as_str()).collect()
    }

    /// Items matching a predicate, as a new set.
    pub fn filter(&self, mut keep: impl FnMut(&Feature) -> bool) -> FeatureSet {
        FeatureSet { dim: self.dim, items: self.items.iter().filter(|f| keep(f)).cloned().collect() }
    }

    /// Items carrying a label.
    pub fn labeled(&self) -> FeatureSet {
        self.filter(|f| f.label.is_some())
    }

    pub fn concat(sets: &[&FeatureSet]) -> Result<FeatureSet, ProbeError> {
        let dim = sets.first().map_or(0, |s| s.dim);
        let items = sets.iter().flat_map(|s| s.items.iter().cloned()).collect();
        FeatureSet::new(dim, items)
    }
}

/// One feature per annotation: the final-layer vector after reading the
/// annotated noun (index `token_index + 1`, since position 0 is BOS).
pub fn extract_features(encoder: &Encoder, dataset: &Dataset) -> Result<FeatureSet, ProbeError> {
    let d = encoder.d_model();
    let mut wanted: Vec<usize> = dataset.annotations.iter().map(|a| a.sentence_index).collect();
    wanted.sort_unstable();
    wanted.dedup();
    for (k, a) in dataset.annotations.iter().enumerate() {
        let found = dataset.sentences.get(a.sentence_index).and_then(|s| s.split_whitespace().nth(a.token_index));
        if found != Some(a.surface.as_str()) {
            return Err(ProbeError::Inconsistent {
                sentence: a.sentence_index,
                annotation: k,
                index: a.token_index,
                expected: a.surface.clone(),
                found: found.unwrap_or("<missing>").to_string(),
            });
        }
    }
    let sentences: Vec<&str> = wanted.iter().map(|&i| dataset.sentences[i].as_str()).collect();
    let hidden = encoder.encode_many(&sentences, 128)?;
    let slot: BTreeMap<usize, usize> = wanted.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let items = dataset
        .annotations
        .iter()
        .map(|a| {
            let h = &hidden[slot[&a.sentence_index]];
            let p = a.token_index + 1;
            Feature {
                vector: h[p * d..(p + 1) * d].to_vec(),
                label: Class::from_gold(a.gold_gender),
                annotation: a.clone(),
            }
        })
        .collect();
    FeatureSet::new(d, items)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2_penalty: f64,
    pub seed: u64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self { epochs: 500, learning_rate: 0.1, l2_penalty: 1e-4, seed: 0 }
    }
}

impl ProbeTrainConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.epochs == 0 {
            return Err(ProbeError::InvalidConfig("epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ProbeError::InvalidConfig(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return Err(ProbeError::InvalidConfig(format!("l2 penalty {} must be non-negative", self.l2_penalty)));
        }
        Ok(())
    }
}

/// A trained probe: row-major `2 × dim` weights (feminine row first), two
/// biases, and the noun types seen in training.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub dim: usize,
    pub weights: Vec<f32>,
    pub bias: [f32; 2],
    pub training_nouns: BTreeSet<String>,
    pub config: ProbeTrainConfig,
    pub final_loss: f64,
}

/// A single decision. Equal logits count as a tie and resolve to masculine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub class: Class,
    pub tie: bool,
}

impl Probe {
    pub fn logits(&self, v: &[f32]) -> [f64; 2] {
        let mut z = [self.bias[0] as f64, self.bias[1] as f64];
        for (c, zc) in z.iter_mut().enumerate() {
            let row = &self.weights[c * self.dim..(c + 1) * self.dim];
            *zc += row.iter().zip(v).map(|(&w, &x)| w as f64 * x as f64).sum::<f64>();
        }
        z
    }

    pub fn predict(&self, v: &[f32]) -> Prediction {
        let [f, m] = self.logits(v);
        if f > m {
            Prediction { class: Class::Feminine, tie: false }
        } else {
            Prediction { class: Class::Masculine, tie: f == m }
        }
    }
}

fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Fits the probe on labeled features. Weights start from small uniform
/// noise drawn from `cfg.seed`; biases start at zero.
pub fn train_probe(features: &FeatureSet, cfg: &ProbeTrainConfig) -> Result<Probe, ProbeError> {
    cfg.validate()?;
    if features.is_empty() {
        return Err(ProbeError::Empty);
    }
    let mut labels = Vec::with_capacity(features.len());
    for (i, f) in features.items.iter().enumerate() {
        labels.push(f.label.ok_or(ProbeError::Unlabeled(i))?.index());
    }
    if labels.iter().all(|&l| l == 0) {
        return Err(ProbeError::SingleClass("feminine"));
    }
    if labels.iter().all(|&l| l == 1) {
        return Err(ProbeError::SingleClass("masculine"));
    }

    let d = features.dim;
    let n = features.len() as f64;
    let xs: Vec<Vec<f64>> = features.items.iter().map(|f| f.vector.iter().map(|&x| x as f64).collect()).collect();
    let mut rng = seed::rng(cfg.seed);
    let mut w: Vec<f64> = (0..2 * d).map(|_| rng.random_range(-0.01..0.01)).collect();
    let mut b = [0.0f64; 2];
    let mut loss = f64::NAN;
    let mut gw = vec![0.0f64; 2 * d];

    for epoch in 1..=cfg.epochs {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = [0.0f64; 2];
        let mut ce = 0.0;
        for (x, &y) in xs.iter().zip(&labels) {
            let z0 = b[0] + w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            let z1 = b[1] + w[d..].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            let lse = log_sum_exp2(z0, z1);
            ce += lse - if y == 0 { z0 } else { z1 };
            let p = [(z0 - lse).exp(), (z1 - lse).exp()];
            for c in 0..2 {
                let delta = p[c] - if c == y { 1.0 } else { 0.0 };
                gb[c] += delta;
                for (g, &xi) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                    *g += delta * xi;
                }
            }
        }
        loss = ce / n + 0.5 * cfg.l2_penalty * w.iter().map(|v| v * v).sum::<f64>();
        if !loss.is_finite() {
            return Err(ProbeError::NonFiniteLoss(epoch));
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= cfg.learning_rate * (g / n + cfg.l2_penalty * *wi);
        }
        for c in 0..2 {
            b[c] -= cfg.learning_rate * gb[c] / n;
        }
    }
    log::debug!("probe trained on {} items, final loss {loss:.5}", features.len());
    Ok(Probe {
        dim: d,
        weights: w.iter().map(|&v| v as f32).collect(),
        bias: [b[0] as f32, b[1] as f32],
        training_nouns: features.items.iter().map(|f| f.annotation.surface.clone()).collect(),
        config: *cfg,
        final_loss: loss,
    })
}

/// Counts over a set of predictions. Rates are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub group: String,
    pub context: String,
    pub n: usize,
    pub labeled: usize,
    pub correct: usize,
    /// Fraction of labeled items predicted correctly; absent without labels.
    pub accuracy: Option<f64>,
    pub feminine: usize,
    pub feminine_rate: f64,
    pub tie_count: usize,
}

impl MetricRecord {
    pub fn from_predictions<'a>(
        group: &str,
        context: &str,
        items: impl IntoIterator<Item = (&'a Feature, Prediction)>,
    ) -> Self {
        let (mut n, mut labeled, mut correct, mut feminine, mut ties) = (0, 0, 0, 0, 0);
        for (f, p) in items {
            n += 1;
            if let Some(l) = f.label {
                labeled += 1;
                correct += usize::from(l == p.class);
            }
            feminine += usize::from(p.class == Class::Feminine);
            ties += usize::from(p.tie);
        }
        MetricRecord {
            group: group.to_string(),
            context: context.to_string(),
            n,
            labeled,
            correct,
            accuracy: (labeled > 0).then(|| correct as f64 / labeled as f64),
            feminine,
            feminine_rate: if n > 0 { feminine as f64 / n as f64 } else { 0.0 },
            tie_count: ties,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub overall: MetricRecord,
    /// One record per (group, context) pair, sorted.
    pub per_group: Vec<MetricRecord>,
}

/// Predictions for every item, after the disjointness gate.
pub fn predict_all(probe: &Probe, features: &FeatureSet) -> Result<Vec<Prediction>, ProbeError> {
    if features.is_empty() {
        return Err(ProbeError::Empty);
    }
    if features.dim != probe.dim {
        return Err(ProbeError::Dimension { expected: probe.dim, found: features.dim });
    }
    let overlap: Vec<String> =
        features.noun_types().into_iter().filter(|t| probe.training_nouns.contains(*t)).map(str::to_string).collect();
    if !overlap.is_empty() {
        return Err(ProbeError::TrainingOverlap(overlap));
    }
    Ok(features.items.iter().map(|f| probe.predict(&f.vector)).collect())
}

pub fn eval_probe(probe: &Probe, features: &FeatureSet) -> Result<ProbeMetrics, ProbeError> {
    let preds = predict_all(probe, features)?;
    let pairs: Vec<(&Feature, Prediction)> = features.items.iter().zip(preds).collect();
    let mut groups: BTreeMap<(&str, &str), Vec<(&Feature, Prediction)>> = BTreeMap::new();
    for &(f, p) in &pairs {
        groups.entry((f.annotation.group.as_str(), f.annotation.context.as_str())).or_default().push((f, p));
    }
    Ok(ProbeMetrics {
        overall: MetricRecord::from_predictions("all", "all", pairs.iter().copied()),
        per_group: groups.into_iter().map(|((g, c), v)| MetricRecord::from_predictions(g, c, v)).collect(),
    })
}

#[derive(Serialize, Deserialize)]
struct ProbeMeta {
    dim: usize,
    config: ProbeTrainConfig,
    final_loss: f64,
    training_nouns: BTreeSet<String>,
}

impl Probe {
    pub fn to_bytes(&self) -> Result<Vec<u8>, ProbeError> {
        let meta = ProbeMeta {
            dim: self.dim,
            config: self.config,
            final_loss: self.final_loss,
            training_nouns: self.training_nouns.clone(),
        };
        let meta = serde_json::to_value(meta).map_err(|e| ModelError::Container(e.to_string()))?;
        let mut payload = self.weights.clone();
        payload.extend_from_slice(&self.bias);
        let tensors = [("weight".to_string(), vec![2, self.dim]), ("bias".to_string(), vec![2])];
        Ok(encode_container("probe", meta, &tensors, &payload)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProbeError> {
        let c = decode_container(bytes)?;
        if c.header.kind != "probe" {
            return Err(ModelError::Container(format!("expected a probe container, found {}", c.header.kind)).into());
        }
        let meta: ProbeMeta =
            serde_json::from_value(c.header.meta.clone()).map_err(|e| ModelError::Container(e.to_string()))?;
        let missing = |name: &str| ModelError::Container(format!("probe container lacks tensor `{name}`"));
        let weights = c.tensor("weight").ok_or_else(|| missing("weight"))?.to_vec();
        let bias = c.tensor("bias").ok_or_else(|| missing("bias"))?;
        if weights.len() != 2 * meta.dim || bias.len() != 2 {
            return Err(ModelError::Container("probe tensor shapes do not match its dimension".into()).into());
        }
        Ok(Probe {
            dim: meta.dim,
            weights,
            bias: [bias[0], bias[1]],
            training_nouns: meta.training_nouns,
            config: meta.config,
            final_loss: meta.final_loss,
        })
    }
}

pub fn save_probe(probe: &Probe, path: &Path) -> Result<(), ProbeError> {
    Ok(write_container_file(path, &probe.to_bytes()?)?)
}

pub fn load_probe(path: &Path) -> Result<Probe, ProbeError> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    Probe::from_bytes(&bytes)
}
