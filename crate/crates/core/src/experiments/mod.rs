//! Multi-seed experiment runs, aggregation with confidence intervals and
//! report tables.

mod report;
mod run;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, LexicalSizes, Sizes};
use crate::model::{ModelError, TrainConfig, TransformerConfig};
use crate::probe::{ProbeError, ProbeTrainConfig};

pub use report::{figure_rows, markdown, render_report, REPORT_FILE};
pub use run::{
    assemble, derive_seeds, exp3_quartiles, proportion_label, run_experiment, run_seed, table_layout, AggregateCell,
    BiasRecord, Cell, ExperimentReport, Quartile, QuartileNoun, RunFailure, RunResult, SeedPlan, TableLayout,
    QUARTILE_NAMES,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("degree of bias needs a positive total")]
    EmptyTotal,
    #[error("majority count {majority} exceeds total {total}")]
    MajorityExceedsTotal { majority: usize, total: usize },
    #[error("cannot aggregate an empty list")]
    EmptyAggregate,
    #[error("no seeds given")]
    NoSeeds,
    #[error("every seed failed")]
    AllFailed,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error("cannot write {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

/// `2 · majority / total − 1`: 0 for balanced predictions, 1 when every
/// prediction is the majority class and −1 when none is.
pub fn degree_of_bias(majority: usize, total: usize) -> Result<f64, ExperimentError> {
    if total == 0 {
        return Err(ExperimentError::EmptyTotal);
    }
    if majority > total {
        return Err(ExperimentError::MajorityExceedsTotal { majority, total });
    }
    Ok(2.0 * majority as f64 / total as f64 - 1.0)
}

/// Mean over seeds with a normal-approximation 95% half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub ci_halfwidth: f64,
    pub n: usize,
}

impl Aggregate {
    /// With a single value the interval is undefined and reported as zero.
    pub fn ci_defined(&self) -> bool {
        self.n > 1
    }
}

pub const Z_95: f64 = 1.96;

/// Sample standard deviation (`n − 1` denominator); zero for one value.
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate, ExperimentError> {
    if values.is_empty() {
        return Err(ExperimentError::EmptyAggregate);
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    Ok(Aggregate { mean, ci_halfwidth: Z_95 * sample_std(values) / (n as f64).sqrt(), n })
}

pub const EXP4_PROPORTIONS: [f64; 5] = [0.5, 0.4, 0.3, 0.2, 0.1];

/// Everything a run needs besides the experiment id and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: TransformerConfig,
    pub train: TrainConfig,
    pub probe: ProbeTrainConfig,
    pub sizes: Sizes,
    pub lexical: LexicalSizes,
    pub zipf_exponent: f64,
    /// Feminine NP proportions for exp4.
    pub proportions: Vec<f64>,
    /// Worker threads for independent seeds.
    pub jobs: usize,
    /// Omit wall-clock timings so that outputs are byte-reproducible.
    pub deterministic: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: TransformerConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeTrainConfig::default(),
            sizes: Sizes::default(),
            lexical: LexicalSizes::default(),
            zipf_exponent: 1.0,
            proportions: EXP4_PROPORTIONS.to_vec(),
            jobs: 1,
            deterministic: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.model.validate()?;
        self.train.validate()?;
        self.probe.validate()?;
        if self.jobs == 0 {
            return Err(ExperimentError::InvalidConfig("jobs must be at least 1".into()));
        }
        if self.proportions.is_empty() {
            return Err(ExperimentError::InvalidConfig("exp4 needs at least one proportion".into()));
        }
        if let Some(p) = self.proportions.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(ExperimentError::InvalidConfig(format!("proportion {p} outside (0, 1)")));
        }
        Ok(())
    }
}
