//! Experiment scenarios and annotated dataset bundles.
//!
//! A scenario binds grammar templates to words drawn from a [`Lexicon`].
//! Building is two-phase: the language-model grammar is resolved first and
//! `lm_train` is sampled from it; every other grammar is then restricted to
//! the words that actually occur in `lm_train`.

mod bundle;
mod generate;
mod scenario;
pub mod templates;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::GrammarError;
use crate::lexicon::LexiconError;

pub use bundle::{read_bundle, write_bundle, BundleManifest, MANIFEST_VERSION};
pub use generate::{annotate, generate_dataset, sample_dataset};
pub use scenario::{build_scenario, GrammarSet, NounCategory, Scenario};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error("feminine NP proportion must lie in (0, 1), got {0}")]
    InvalidProportion(f64),
    #[error("{0}")]
    InconsistentSpec(String),
    #[error("placeholder `{placeholder}` is unbound in the {role} grammar")]
    PlaceholderUnbound { role: String, placeholder: String },
    #[error("category `{category}` has no words left in the {role} grammar after vocabulary filtering")]
    EmptyCategory { role: String, category: String },
    #[error("{role} uses word `{word}` absent from lm_train")]
    OutOfVocabulary { role: String, word: String },
    #[error("noun `{noun}` is annotated in both probe_train and probe_test {group}")]
    ProbeOverlap { noun: String, group: String },
    #[error("cannot access {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },
    #[error("corrupt bundle: {path} has hash {actual}, manifest records {expected}")]
    Corruption { path: String, expected: String, actual: String },
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentId {
    Exp1,
    Exp2,
    Exp3,
    Exp4,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 4] = [ExperimentId::Exp1, ExperimentId::Exp2, ExperimentId::Exp3, ExperimentId::Exp4];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentId::Exp1 => "exp1",
            ExperimentId::Exp2 => "exp2",
            ExperimentId::Exp3 => "exp3",
            ExperimentId::Exp4 => "exp4",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        ExperimentId::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| format!("unknown experiment `{s}` (expected exp1, exp2, exp3 or exp4)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sizes {
    pub lm_train: usize,
    pub lm_dev: usize,
    pub probe_train: usize,
    pub probe_test_per_group: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Self { lm_train: 10_000, lm_dev: 1_000, probe_train: 1_000, probe_test_per_group: 1_000 }
    }
}

/// Word counts drawn from the lexicon for one scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LexicalSizes {
    pub nouns: usize,
    /// Per gender (feminine, masculine, epicene).
    pub adjectives: usize,
    pub verbs: usize,
    pub prepositions: usize,
    /// Per gender (feminine, masculine, epicene).
    pub determiners: usize,
}

impl Default for LexicalSizes {
    fn default() -> Self {
        Self { nouns: 400, adjectives: 100, verbs: 20, prepositions: 5, determiners: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub experiment: ExperimentId,
    /// Probability of the feminine branch in every gender choice of the
    /// language-model grammar (exp4 only).
    pub feminine_np_proportion: Option<f64>,
    pub sizes: Sizes,
    pub lexical: LexicalSizes,
    pub zipf_exponent: f64,
    /// Adds probe-seen noun groups as extra probe_test files (exp1).
    pub include_seen_groups: bool,
    pub master_seed: u64,
}

impl ScenarioSpec {
    pub fn new(experiment: ExperimentId, master_seed: u64) -> Self {
        Self {
            experiment,
            feminine_np_proportion: None,
            sizes: Sizes::default(),
            lexical: LexicalSizes::default(),
            zipf_exponent: 1.0,
            include_seen_groups: false,
            master_seed,
        }
    }

    pub fn with_proportion(mut self, p: f64) -> Self {
        self.feminine_np_proportion = Some(p);
        self
    }

    pub fn with_sizes(mut self, sizes: Sizes) -> Self {
        self.sizes = sizes;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Context {
    GenderedFeminine,
    GenderedMasculine,
    Ambiguous,
}

impl Context {
    pub fn as_str(self) -> &'static str {
        match self {
            Context::GenderedFeminine => "gendered_feminine",
            Context::GenderedMasculine => "gendered_masculine",
            Context::Ambiguous => "ambiguous",
        }
    }

    pub fn is_gendered(self) -> bool {
        self != Context::Ambiguous
    }
}

impl FromStr for Context {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gendered_feminine" => Ok(Context::GenderedFeminine),
            "gendered_masculine" => Ok(Context::GenderedMasculine),
            "ambiguous" => Ok(Context::Ambiguous),
            _ => Err(format!("unknown context `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoldGender {
    Feminine,
    Masculine,
    None,
}

impl GoldGender {
    pub fn as_str(self) -> &'static str {
        match self {
            GoldGender::Feminine => "feminine",
            GoldGender::Masculine => "masculine",
            GoldGender::None => "none",
        }
    }
}

impl FromStr for GoldGender {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "feminine" => Ok(GoldGender::Feminine),
            "masculine" => Ok(GoldGender::Masculine),
            "none" => Ok(GoldGender::None),
            _ => Err(format!("unknown gender `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NounAnnotation {
    pub sentence_index: usize,
    pub token_index: usize,
    pub surface: String,
    pub group: String,
    pub context: Context,
    pub gold_gender: GoldGender,
}

/// Sentences (whitespace-joined tokens) with noun annotations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub sentences: Vec<String>,
    pub annotations: Vec<NounAnnotation>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn tokens(&self, i: usize) -> impl Iterator<Item = &str> {
        self.sentences[i].split_whitespace()
    }

    pub fn vocabulary(&self) -> std::collections::BTreeSet<&str> {
        self.sentences.iter().flat_map(|s| s.split_whitespace()).collect()
    }

    /// Noun types that carry an annotation.
    pub fn annotated_nouns(&self) -> std::collections::BTreeSet<&str> {
        self.annotations.iter().map(|a| a.surface.as_str()).collect()
    }
}

/// Context in which a probe_test file places its nouns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestContext {
    Gendered,
    Ambiguous,
    Feminine,
    Masculine,
}

impl TestContext {
    pub fn as_str(self) -> &'static str {
        match self {
            TestContext::Gendered => "gendered",
            TestContext::Ambiguous => "ambiguous",
            TestContext::Feminine => "feminine",
            TestContext::Masculine => "masculine",
        }
    }
}

impl FromStr for TestContext {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gendered" => Ok(TestContext::Gendered),
            "ambiguous" => Ok(TestContext::Ambiguous),
            "feminine" => Ok(TestContext::Feminine),
            "masculine" => Ok(TestContext::Masculine),
            _ => Err(format!("unknown test context `{s}`")),
        }
    }
}

/// One probe_test file: a noun group placed in one context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TestKey {
    pub group: &'static str,
    pub context: TestContext,
}

impl TestKey {
    pub fn name(&self) -> String {
        format!("{}_{}", self.group, self.context.as_str())
    }
}

impl fmt::Display for TestKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.group, self.context.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub spec: ScenarioSpec,
    /// Resolved grammar notation per role (`lm_train`, `probe_train`,
    /// `probe_test/<key>`).
    pub grammars: std::collections::BTreeMap<String, String>,
    pub lm_train: Dataset,
    pub lm_dev: Dataset,
    pub probe_train: Dataset,
    /// Keyed by test file name, e.g. `FemAU_ambiguous`.
    pub probe_tests: std::collections::BTreeMap<String, Dataset>,
}

impl DatasetBundle {
    /// Every word outside lm_train, by role. Empty for a well-formed bundle.
    pub fn out_of_vocabulary(&self) -> Vec<(String, String)> {
        let vocab = self.lm_train.vocabulary();
        let mut out = Vec::new();
        let mut check = |role: &str, d: &Dataset| {
            for w in d.vocabulary() {
                if !vocab.contains(w) {
                    out.push((role.to_string(), w.to_string()));
                }
            }
        };
        check("lm_dev", &self.lm_dev);
        check("probe_train", &self.probe_train);
        for (k, d) in &self.probe_tests {
            check(&format!("probe_test/{k}"), d);
        }
        out
    }

    /// Noun types annotated both in probe_train and in a probe_test file.
    pub fn probe_overlap(&self) -> Vec<(String, String)> {
        let train = self.probe_train.annotated_nouns();
        let mut out = Vec::new();
        for (k, d) in &self.probe_tests {
            for n in d.annotated_nouns() {
                if train.contains(n) {
                    out.push((k.clone(), n.to_string()));
                }
            }
        }
        out
    }
}
