use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{aggregate, degree_of_bias, Aggregate, ExperimentConfig, ExperimentError};
use crate::corpus::{
    build_scenario, generate_dataset, read_bundle, write_bundle, DatasetBundle, ExperimentId, Scenario, ScenarioSpec,
};
use crate::lexicon::Lexicon;
use crate::model::{load_checkpoint, save_checkpoint, train_lm, Checkpoint, Encoder};
use crate::probe::{
    extract_features, predict_all, save_probe, train_probe, Class, Feature, FeatureSet, MetricRecord, Prediction,
};
use crate::seed;

pub const QUARTILE_NAMES: [&str; 4] = ["very rare", "rare", "frequent", "very frequent"];

/// One unit of work: a seed, plus the feminine proportion for exp4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub index: usize,
    pub seed: u64,
    pub proportion: Option<f64>,
}

impl SeedPlan {
    /// File stem for this run's artifacts, e.g. `seed-03` or `p0.20-seed-03`.
    pub fn name(&self) -> String {
        match self.proportion {
            Some(p) => format!("p{p:.2}-seed-{:02}", self.index),
            None => format!("seed-{:02}", self.index),
        }
    }
}

/// One value of the experiment's result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub row: String,
    pub column: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileNoun {
    pub surface: String,
    /// Expected occurrences per lm_train sentence under the lm grammar.
    pub expected_frequency: f64,
    pub lm_train_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quartile {
    pub name: String,
    pub nouns: Vec<QuartileNoun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRecord {
    pub feminine_proportion: f64,
    pub seed: u64,
    pub degree_of_bias: f64,
    pub majority_class: Class,
    /// True at p = 0.5, where masculine is the majority only by convention.
    pub majority_by_convention: bool,
    pub majority_predictions: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub experiment: ExperimentId,
    pub plan: SeedPlan,
    /// Overall metrics of every probe_test file.
    pub records: Vec<MetricRecord>,
    pub cells: Vec<Cell>,
    pub lm_dev_perplexity: f64,
    pub lm_best_epoch: usize,
    pub probe_train_items: usize,
    pub probe_final_loss: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub quartiles: Vec<Quartile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<BiasRecord>,
    /// Wall-clock seconds; omitted in deterministic mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

impl RunResult {
    pub fn cell(&self, row: &str, column: &str) -> Option<f64> {
        self.cells.iter().find(|c| c.row == row && c.column == column).map(|c| c.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub plan: SeedPlan,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub row: String,
    pub column: String,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: ExperimentId,
    pub config: ExperimentConfig,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
    pub aggregates: Vec<AggregateCell>,
    /// Dev perplexity of the language models over all runs.
    pub lm_dev_perplexity: Option<Aggregate>,
    /// Runs expected per table cell.
    pub expected_n: usize,
    /// Some cell aggregates fewer runs than expected.
    pub shortfall: bool,
}

impl ExperimentReport {
    pub fn aggregate(&self, row: &str, column: &str) -> Option<Aggregate> {
        self.aggregates.iter().find(|a| a.row == row && a.column == column).map(|a| a.aggregate)
    }
}

/// Rows and columns of an experiment's result table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableLayout {
    pub title: &'static str,
    pub row_header: &'static str,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub metric: &'static str,
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

pub fn proportion_label(p: f64) -> String {
    format!("{p:.2}")
}

pub fn table_layout(id: ExperimentId, cfg: &ExperimentConfig) -> TableLayout {
    match id {
        ExperimentId::Exp1 => TableLayout {
            title: "Probe accuracy (%) on probe-unseen nouns",
            row_header: "lm_train context \\ inference context",
            rows: strings(&["ambiguous", "gendered"]),
            columns: strings(&["ambiguous", "gendered"]),
            metric: "accuracy (%)",
        },
        ExperimentId::Exp2 => TableLayout {
            title: "Feminine probe predictions (%) by noun category",
            row_header: "noun category \\ inference context",
            rows: strings(&["Masc", "25", "50", "75", "Fem"]),
            columns: strings(&["masculine", "ambiguous", "feminine"]),
            metric: "feminine rate (%)",
        },
        ExperimentId::Exp3 => TableLayout {
            title: "Probe accuracy (%) by noun frequency quartile",
            row_header: "frequency quartile \\ inference context",
            rows: strings(&QUARTILE_NAMES),
            columns: strings(&["ambiguous", "gendered"]),
            metric: "accuracy (%)",
        },
        ExperimentId::Exp4 => TableLayout {
            title: "Degree of bias toward the majority gender",
            row_header: "feminine proportion p",
            rows: cfg.proportions.iter().map(|&p| proportion_label(p)).collect(),
            columns: strings(&["degree_of_bias"]),
            metric: "degree of bias",
        },
    }
}

fn scenario_spec(id: ExperimentId, cfg: &ExperimentConfig, plan: &SeedPlan) -> ScenarioSpec {
    let mut spec = ScenarioSpec::new(id, seed::derive_named(plan.seed, "corpus"));
    spec.feminine_np_proportion = plan.proportion;
    spec.sizes = cfg.sizes;
    spec.lexical = cfg.lexical;
    spec.zipf_exponent = cfg.zipf_exponent;
    spec
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

/// Bundle for a plan, reused from `dir` when its manifest records the same
/// scenario spec.
fn bundle_stage(scenario: &Scenario, dir: Option<&Path>) -> Result<DatasetBundle, ExperimentError> {
    if let Some(dir) = dir {
        if dir.join("manifest.json").exists() {
            match read_bundle(dir) {
                Ok(b) if b.spec == scenario.spec => {
                    log::info!("reusing bundle {}", dir.display());
                    return Ok(b);
                }
                Ok(_) => log::info!("bundle {} has a different spec; regenerating", dir.display()),
                Err(e) => log::warn!("discarding bundle {}: {e}", dir.display()),
            }
        }
    }
    let bundle = generate_dataset(scenario)?;
    if let Some(dir) = dir {
        write_bundle(&bundle, dir)?;
    }
    Ok(bundle)
}

/// Language model for a bundle, reused when the key file next to the
/// checkpoint matches the hash of corpus and configuration.
fn lm_stage(
    bundle: &DatasetBundle,
    cfg: &ExperimentConfig,
    lm_seed: u64,
    dir: Option<&Path>,
) -> Result<Checkpoint, ExperimentError> {
    let train_cfg = crate::model::TrainConfig { seed: lm_seed, ..cfg.train };
    let key = sha_hex(&[
        bundle.lm_train.sentences.join("\n").as_bytes(),
        bundle.lm_dev.sentences.join("\n").as_bytes(),
        serde_json::to_string(&cfg.model).expect("config serialises").as_bytes(),
        serde_json::to_string(&train_cfg).expect("config serialises").as_bytes(),
    ]);
    let paths = dir.map(|d| (d.join("lm.ckpt"), d.join("lm.key")));
    if let Some((ckpt, key_path)) = &paths {
        if std::fs::read_to_string(key_path).is_ok_and(|k| k.trim() == key) {
            match load_checkpoint(ckpt) {
                Ok(c) => {
                    log::info!("reusing language model {}", ckpt.display());
                    return Ok(c);
                }
                Err(e) => log::warn!("discarding checkpoint {}: {e}", ckpt.display()),
            }
        }
    }
    let ckpt = train_lm(&bundle.lm_train.sentences, &bundle.lm_dev.sentences, &cfg.model, &train_cfg)?;
    if let Some((path, key_path)) = &paths {
        save_checkpoint(&ckpt, path)?;
        std::fs::write(key_path, format!("{key}\n")).map_err(io_err(key_path))?;
    }
    Ok(ckpt)
}

/// Quartiles of the tested fixed-gender nouns by expected lm_train
/// frequency, rarest first; ties are broken by surface form. Sizes differ
/// by at most one, larger quartiles first.
pub fn exp3_quartiles(scenario: &Scenario, bundle: &DatasetBundle) -> Result<Vec<Quartile>, ExperimentError> {
    let freq = scenario.lm_grammar.expected_terminal_frequency().map_err(crate::corpus::CorpusError::from)?;
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in &bundle.lm_train.sentences {
        for w in s.split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut nouns: Vec<QuartileNoun> = Vec::new();
    for cat in ["NOUNFem", "NOUNMasc"] {
        let reserved = scenario.probe_train_words.get(cat);
        for (w, _) in &scenario.categories[cat] {
            if reserved.is_some_and(|r| r.contains(w)) || !counts.contains_key(w.as_str()) {
                continue;
            }
            nouns.push(QuartileNoun {
                surface: w.clone(),
                expected_frequency: freq.get(w).copied().unwrap_or(0.0),
                lm_train_count: counts[w.as_str()],
            });
        }
    }
    nouns.sort_by(|a, b| a.expected_frequency.total_cmp(&b.expected_frequency).then_with(|| a.surface.cmp(&b.surface)));
    let (base, extra) = (nouns.len() / 4, nouns.len() % 4);
    let mut rest = nouns.into_iter();
    Ok(QUARTILE_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| Quartile {
            name: name.to_string(),
            nouns: rest.by_ref().take(base + usize::from(i < extra)).collect(),
        })
        .collect())
}

fn percent(r: &MetricRecord) -> f64 {
    r.accuracy.map_or(f64::NAN, |a| 100.0 * a)
}

/// Runs one plan end to end: corpus, language model, probe, evaluation.
/// With `dir`, the bundle, checkpoint and probe are stored there and reused
/// on later calls with identical inputs.
pub fn run_seed(
    id: ExperimentId,
    lexicon: &Lexicon,
    cfg: &ExperimentConfig,
    plan: &SeedPlan,
    dir: Option<&Path>,
) -> Result<RunResult, ExperimentError> {
    let started = Instant::now();
    let scenario = build_scenario(&scenario_spec(id, cfg, plan), lexicon)?;
    let bundle = bundle_stage(&scenario, dir.map(|d| d.join("bundle")).as_deref())?;
    let ckpt = lm_stage(&bundle, cfg, seed::derive_named(plan.seed, "lm"), dir)?;
    let encoder = Encoder::new(&ckpt);

    let train_features = extract_features(&encoder, &bundle.probe_train)?.labeled();
    let probe_cfg = crate::probe::ProbeTrainConfig { seed: seed::derive_named(plan.seed, "probe"), ..cfg.probe };
    let probe = train_probe(&train_features, &probe_cfg)?;
    if let Some(d) = dir {
        save_probe(&probe, &d.join("probe.ckpt"))?;
    }

    let mut tests: BTreeMap<String, (FeatureSet, Vec<Prediction>)> = BTreeMap::new();
    let mut records = Vec::new();
    for key in &scenario.test_keys {
        let name = key.name();
        let features = extract_features(&encoder, &bundle.probe_tests[&name])?;
        if features.is_empty() {
            log::warn!("{}: probe_test {name} has no annotated nouns", plan.name());
            continue;
        }
        let preds = predict_all(&probe, &features)?;
        records.push(MetricRecord::from_predictions(
            key.group,
            key.context.as_str(),
            features.items.iter().zip(preds.iter().copied()),
        ));
        tests.insert(name, (features, preds));
    }
    let pooled = |names: &[String], keep: &dyn Fn(&Feature) -> bool| -> MetricRecord {
        let items = names
            .iter()
            .filter_map(|n| tests.get(n.as_str()))
            .flat_map(|(f, p)| f.items.iter().zip(p.iter().copied()))
            .filter(|(f, _)| keep(f));
        MetricRecord::from_predictions("pooled", "pooled", items)
    };

    let mut cells = Vec::new();
    let mut quartiles = Vec::new();
    let mut bias = None;
    let mut push =
        |row: &str, column: &str, value: f64| cells.push(Cell { row: row.into(), column: column.into(), value });
    match id {
        ExperimentId::Exp1 => {
            for (row, x) in [("ambiguous", "A"), ("gendered", "G")] {
                for col in ["ambiguous", "gendered"] {
                    let names = [format!("Fem{x}U_{col}"), format!("Masc{x}U_{col}")];
                    push(row, col, percent(&pooled(&names, &|_| true)));
                }
            }
        }
        ExperimentId::Exp2 => {
            for row in ["Masc", "25", "50", "75", "Fem"] {
                for col in ["masculine", "ambiguous", "feminine"] {
                    let r = pooled(&[format!("{row}_{col}")], &|_| true);
                    push(row, col, 100.0 * r.feminine_rate);
                }
            }
        }
        ExperimentId::Exp3 => {
            quartiles = exp3_quartiles(&scenario, &bundle)?;
            let ambiguous = ["Fem_ambiguous".to_string(), "Masc_ambiguous".to_string()];
            let gendered = ["Fem_feminine".to_string(), "Masc_masculine".to_string()];
            for q in &quartiles {
                let members: BTreeSet<&str> = q.nouns.iter().map(|n| n.surface.as_str()).collect();
                let keep = |f: &Feature| members.contains(f.annotation.surface.as_str());
                push(&q.name, "ambiguous", percent(&pooled(&ambiguous, &keep)));
                push(&q.name, "gendered", percent(&pooled(&gendered, &keep)));
            }
        }
        ExperimentId::Exp4 => {
            let p = plan.proportion.expect("exp4 plans carry a proportion");
            let majority_class = if p > 0.5 { Class::Feminine } else { Class::Masculine };
            let names = ["FemAU_ambiguous".to_string(), "MascAU_ambiguous".to_string()];
            let r = pooled(&names, &|_| true);
            let majority = if majority_class == Class::Feminine { r.feminine } else { r.n - r.feminine };
            let b = degree_of_bias(majority, r.n)?;
            push(&proportion_label(p), "degree_of_bias", b);
            bias = Some(BiasRecord {
                feminine_proportion: p,
                seed: plan.seed,
                degree_of_bias: b,
                majority_class,
                majority_by_convention: p == 0.5,
                majority_predictions: majority,
                total: r.n,
            });
        }
    }

    let best = ckpt.log.get(ckpt.best_epoch - 1).map_or(f64::NAN, |l| l.dev_ppl);
    let result = RunResult {
        experiment: id,
        plan: *plan,
        records,
        cells,
        lm_dev_perplexity: best,
        lm_best_epoch: ckpt.best_epoch,
        probe_train_items: train_features.len(),
        probe_final_loss: probe.final_loss,
        quartiles,
        bias,
        seconds: (!cfg.deterministic).then(|| started.elapsed().as_secs_f64()),
    };
    log::info!("{id} {}: done (dev ppl {:.3})", plan.name(), result.lm_dev_perplexity);
    Ok(result)
}

fn plans(id: ExperimentId, cfg: &ExperimentConfig, seeds: &[u64]) -> Vec<SeedPlan> {
    let per_seed =
        |proportion| seeds.iter().enumerate().map(move |(index, &seed)| SeedPlan { index, seed, proportion });
    match id {
        ExperimentId::Exp4 => cfg.proportions.iter().flat_map(|&p| per_seed(Some(p))).collect(),
        _ => per_seed(None).collect(),
    }
}

/// Runs every seed (and, for exp4, every proportion), independently and in
/// parallel over `cfg.jobs` workers. Failed runs are recorded and excluded;
/// the report flags any resulting shortfall. With `dir`, per-run artifacts
/// are cached under `dir/runs/<plan>`.
pub fn run_experiment(
    id: ExperimentId,
    lexicon: &Lexicon,
    seeds: &[u64],
    master_seed: u64,
    cfg: &ExperimentConfig,
    dir: Option<&Path>,
) -> Result<ExperimentReport, ExperimentError> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(ExperimentError::NoSeeds);
    }
    let plans = plans(id, cfg, seeds);
    let outcomes: Mutex<Vec<Option<Result<RunResult, String>>>> = Mutex::new(vec![None; plans.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..cfg.jobs.min(plans.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(plan) = plans.get(i) else { break };
                let run_dir: Option<PathBuf> = dir.map(|d| d.join("runs").join(plan.name()));
                let out = run_seed(id, lexicon, cfg, plan, run_dir.as_deref()).map_err(|e| {
                    log::error!("{id} {} failed: {e}", plan.name());
                    e.to_string()
                });
                outcomes.lock().expect("no poisoned workers")[i] = Some(out);
            });
        }
    });

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (plan, out) in plans.iter().zip(outcomes.into_inner().expect("no poisoned workers")) {
        match out.expect("every plan ran") {
            Ok(r) => runs.push(r),
            Err(error) => failures.push(RunFailure { plan: *plan, error }),
        }
    }
    if runs.is_empty() {
        return Err(ExperimentError::AllFailed);
    }
    Ok(assemble(id, cfg.clone(), master_seed, seeds.to_vec(), runs, failures))
}

/// Builds the aggregate table from per-run records.
pub fn assemble(
    id: ExperimentId,
    config: ExperimentConfig,
    master_seed: u64,
    seeds: Vec<u64>,
    runs: Vec<RunResult>,
    failures: Vec<RunFailure>,
) -> ExperimentReport {
    let layout = table_layout(id, &config);
    let mut aggregates = Vec::new();
    let mut shortfall = false;
    for row in &layout.rows {
        for column in &layout.columns {
            let values: Vec<f64> = runs.iter().filter_map(|r| r.cell(row, column)).filter(|v| !v.is_nan()).collect();
            shortfall |= values.len() < seeds.len();
            if let Ok(aggregate) = aggregate(&values) {
                aggregates.push(AggregateCell { row: row.clone(), column: column.clone(), aggregate });
            }
        }
    }
    let ppl: Vec<f64> = runs.iter().map(|r| r.lm_dev_perplexity).collect();
    ExperimentReport {
        experiment: id,
        lm_dev_perplexity: aggregate(&ppl).ok(),
        expected_n: seeds.len(),
        shortfall,
        config,
        master_seed,
        seeds,
        runs,
        failures,
        aggregates,
    }
}

/// The `n` run seeds derived from a master seed.
pub fn derive_seeds(master: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| seed::derive(seed::derive_named(master, "runs"), i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sizes;
    use crate::model::{TrainConfig, TransformerConfig};

    #[test]
    fn plan_names() {
        let p = SeedPlan { index: 3, seed: 9, proportion: None };
        assert_eq!(p.name(), "seed-03");
        assert_eq!(SeedPlan { proportion: Some(0.2), ..p }.name(), "p0.20-seed-03");
    }

    #[test]
    fn exp4_plans_cover_every_proportion() {
        let cfg = ExperimentConfig::default();
        let ps = plans(ExperimentId::Exp4, &cfg, &[1, 2, 3, 4, 5]);
        assert_eq!(ps.len(), 25);
        assert_eq!(plans(ExperimentId::Exp1, &cfg, &[1, 2]).len(), 2);
    }

    #[test]
    fn derived_seeds_are_distinct_and_stable() {
        let a = derive_seeds(7, 20);
        assert_eq!(a, derive_seeds(7, 20));
        assert_eq!(a.iter().collect::<BTreeSet<_>>().len(), 20);
        assert_eq!(&derive_seeds(7, 5)[..], &a[..5]);
    }

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            model: TransformerConfig {
                d_model: 16,
                layers: 1,
                heads: 2,
                d_ff: 32,
                dropout: 0.0,
                max_sequence_length: 64,
            },
            train: TrainConfig { epochs: 2, batch_size: 32, learning_rate: 3e-3, ..TrainConfig::default() },
            probe: crate::probe::ProbeTrainConfig { epochs: 50, ..Default::default() },
            sizes: Sizes { lm_train: 600, lm_dev: 50, probe_train: 80, probe_test_per_group: 30 },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn exp3_quartiles_partition_tested_nouns() {
        let cfg = small_config();
        let plan = SeedPlan { index: 0, seed: 11, proportion: None };
        let scenario = build_scenario(&scenario_spec(ExperimentId::Exp3, &cfg, &plan), &Lexicon::bundled()).unwrap();
        let bundle = generate_dataset(&scenario).unwrap();
        let qs = exp3_quartiles(&scenario, &bundle).unwrap();
        let sizes: Vec<usize> = qs.iter().map(|q| q.nouns.len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1, "{sizes:?}");
        let all: Vec<&str> = qs.iter().flat_map(|q| q.nouns.iter().map(|n| n.surface.as_str())).collect();
        let unique: BTreeSet<&str> = all.iter().copied().collect();
        assert_eq!(all.len(), unique.len());
        // Every noun annotated in a fixed-gender probe_test file is covered.
        for (name, d) in &bundle.probe_tests {
            for n in d.annotated_nouns() {
                assert!(unique.contains(n), "{name}: {n}");
            }
        }
        // Frequencies are non-decreasing across the concatenated quartiles.
        let f: Vec<f64> = qs.iter().flat_map(|q| q.nouns.iter().map(|n| n.expected_frequency)).collect();
        assert!(f.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn small_runs_for_every_experiment() {
        let lex = Lexicon::bundled();
        for id in ExperimentId::ALL {
            let cfg = ExperimentConfig { proportions: vec![0.5, 0.2], deterministic: true, ..small_config() };
            let report = run_experiment(id, &lex, &[1, 2], 0, &cfg, None).unwrap();
            assert!(report.failures.is_empty(), "{:?}", report.failures);
            let layout = table_layout(id, &cfg);
            for run in &report.runs {
                let rows = match run.plan.proportion {
                    Some(p) => vec![proportion_label(p)],
                    None => layout.rows.clone(),
                };
                for row in &rows {
                    for col in &layout.columns {
                        let v = run.cell(row, col);
                        assert!(v.is_some(), "{id} {row} {col}");
                    }
                }
                for c in &run.cells {
                    if id == ExperimentId::Exp4 {
                        assert!((-1.0..=1.0).contains(&c.value));
                    } else if !c.value.is_nan() {
                        assert!((0.0..=100.0).contains(&c.value), "{id} {c:?}");
                    }
                }
            }
            // Aggregates are reproducible from the retained per-run cells.
            for a in &report.aggregates {
                let values: Vec<f64> =
                    report.runs.iter().filter_map(|r| r.cell(&a.row, &a.column)).filter(|v| !v.is_nan()).collect();
                assert_eq!(aggregate(&values).unwrap(), a.aggregate);
            }
            if id == ExperimentId::Exp4 {
                assert_eq!(report.runs.len(), 4);
                let flagged: Vec<bool> =
                    report.runs.iter().map(|r| r.bias.as_ref().unwrap().majority_by_convention).collect();
                assert_eq!(flagged, [true, true, false, false]);
            }
        }
    }

    #[test]
    fn failed_seeds_are_recorded_and_flagged() {
        let lex = Lexicon::bundled();
        // A one-sentence dev set is fine but a zero-sentence lm_dev makes every
        // run fail inside the language model stage.
        let mut cfg = small_config();
        cfg.sizes.lm_dev = 0;
        let err = run_experiment(ExperimentId::Exp1, &lex, &[1], 0, &cfg, None).unwrap_err();
        assert!(matches!(err, ExperimentError::AllFailed));
    }

    #[test]
    fn missing_runs_flag_a_shortfall() {
        let lex = Lexicon::bundled();
        let cfg = ExperimentConfig { deterministic: true, ..small_config() };
        let report = run_experiment(ExperimentId::Exp1, &lex, &[3], 0, &cfg, None).unwrap();
        assert!(!report.shortfall);
        let failure = RunFailure { plan: SeedPlan { index: 1, seed: 4, proportion: None }, error: "boom".into() };
        let partial = assemble(ExperimentId::Exp1, cfg, 0, vec![3, 4], report.runs.clone(), vec![failure]);
        assert!(partial.shortfall);
        assert!(partial.aggregates.iter().all(|a| a.aggregate.n == 1));
    }

    #[test]
    fn cached_rerun_is_identical() {
        let lex = Lexicon::bundled();
        let cfg = ExperimentConfig { deterministic: true, ..small_config() };
        let dir = tempfile::tempdir().unwrap();
        let a = run_experiment(ExperimentId::Exp1, &lex, &[5], 0, &cfg, Some(dir.path())).unwrap();
        let ckpt = dir.path().join("runs/seed-00/lm.ckpt");
        let before = std::fs::metadata(&ckpt).unwrap().modified().unwrap();
        let b = run_experiment(ExperimentId::Exp1, &lex, &[5], 0, &cfg, Some(dir.path())).unwrap();
        assert_eq!(a, b);
        assert_eq!(std::fs::metadata(&ckpt).unwrap().modified().unwrap(), before);
        let c = run_experiment(ExperimentId::Exp1, &lex, &[5], 0, &cfg, None).unwrap();
        assert_eq!(a, c);
    }
}
