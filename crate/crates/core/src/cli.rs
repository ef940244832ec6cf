//! Command-line pipeline: corpus generation, language-model and probe
//! training, full experiment runs, report rendering and self-checks.
//!
//! Every configuration field can be set from a JSON file (`--config`) and
//! overridden by a flag of the same dotted name, e.g. `--train.epochs 10`
//! or `--sizes.lm_train=2000`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{
    build_scenario, generate_dataset, read_bundle, templates, write_bundle, CorpusError, ExperimentId, LexicalSizes,
    ScenarioSpec, Sizes,
};
use crate::experiments::{
    derive_seeds, render_report, run_experiment, ExperimentConfig, ExperimentError, ExperimentReport, REPORT_FILE,
};
use crate::grammar::parse_grammar;
use crate::lexicon::{load_lexicon, Lexicon, LexiconError};
use crate::model::{
    gradcheck::component_checks, gradient_check, load_checkpoint, log_csv, save_checkpoint, train_lm, ModelError,
    TrainConfig, TransformerConfig,
};
use crate::probe::{eval_probe, extract_features, save_probe, train_probe, ProbeError, ProbeMetrics, ProbeTrainConfig};
use crate::seed;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_STAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("configuration key `{key}` expects {expected}, got `{value}`")]
    KeyType { key: String, expected: &'static str, value: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot access {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("{0} check(s) failed")]
    Check(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::UnknownKey(_) | CliError::KeyType { .. } | CliError::Config(_) => EXIT_USAGE,
            _ => EXIT_STAGE,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::UnknownKey(_) | CliError::KeyType { .. } | CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Lexicon(_) => "lexicon",
            CliError::Corpus(_) => "corpus",
            CliError::Model(_) => "model",
            CliError::Probe(_) => "probe",
            CliError::Experiment(_) => "experiment",
            CliError::Check(_) => "check",
        }
    }

    fn path(&self) -> Option<&Path> {
        match self {
            CliError::Io { path, .. }
            | CliError::Lexicon(LexiconError::Io { path, .. })
            | CliError::Corpus(CorpusError::Io { path, .. })
            | CliError::Model(ModelError::Io { path, .. })
            | CliError::Probe(ProbeError::Model(ModelError::Io { path, .. }))
            | CliError::Experiment(ExperimentError::Io { path, .. }) => Some(path),
            _ => None,
        }
    }

    /// Machine-readable error record, printed as one JSON line on stderr.
    pub fn record(&self, stage: &str) -> Value {
        serde_json::json!({
            "error": {
                "stage": stage,
                "kind": self.kind(),
                "message": self.to_string(),
                "path": self.path().map(|p| p.display().to_string()),
                "exit_code": self.exit_code(),
            }
        })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Fully resolved configuration of a pipeline invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// A single experiment, or all four when absent.
    pub experiment: Option<ExperimentId>,
    /// Lexicon TSV; the bundled lexicon when absent.
    pub lexicon: Option<PathBuf>,
    pub out: PathBuf,
    pub master_seed: u64,
    pub seeds: usize,
    pub jobs: usize,
    pub deterministic: bool,
    pub model: TransformerConfig,
    pub train: TrainConfig,
    pub probe: ProbeTrainConfig,
    pub sizes: Sizes,
    pub lexical: LexicalSizes,
    pub zipf_exponent: f64,
    pub proportions: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            experiment: None,
            lexicon: None,
            out: PathBuf::from("results"),
            master_seed: 0,
            seeds: 20,
            jobs: e.jobs,
            deterministic: e.deterministic,
            model: e.model,
            train: e.train,
            probe: e.probe,
            sizes: e.sizes,
            lexical: e.lexical,
            zipf_exponent: e.zipf_exponent,
            proportions: e.proportions,
        }
    }
}

impl RunConfig {
    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model,
            train: self.train,
            probe: self.probe,
            sizes: self.sizes,
            lexical: self.lexical,
            zipf_exponent: self.zipf_exponent,
            proportions: self.proportions.clone(),
            jobs: self.jobs,
            deterministic: self.deterministic,
        }
    }

    pub fn experiments(&self) -> Vec<ExperimentId> {
        self.experiment.map_or(ExperimentId::ALL.to_vec(), |e| vec![e])
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds == 0 {
            return Err(CliError::Config("seeds must be at least 1".into()));
        }
        self.experiment_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(p) = &self.lexicon {
            if !p.is_file() {
                return Err(CliError::Config(format!("lexicon {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    fn load_lexicon(&self) -> Result<Lexicon, CliError> {
        Ok(match &self.lexicon {
            Some(p) => load_lexicon(p)?,
            None => Lexicon::bundled(),
        })
    }
}

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

/// Sets `key` (dotted path) in `root` to `raw`, read as JSON when possible
/// and as a plain string otherwise. The key must already exist, and the new
/// value must have the same JSON kind as the old one unless the old one is
/// null.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let mut slot = &mut *root;
    for part in key.split('.') {
        slot = slot.get_mut(part).ok_or_else(|| CliError::UnknownKey(key.to_string()))?;
    }
    let mut value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    // String fields (paths, ids) take the raw text even when it parses as JSON.
    if slot.is_string() {
        value = Value::String(raw.to_string());
    }
    let compatible = matches!(
        (&*slot, &value),
        (Value::Null, _)
            | (_, Value::Null)
            | (Value::Bool(_), Value::Bool(_))
            | (Value::Number(_), Value::Number(_))
            | (Value::String(_), Value::String(_))
            | (Value::Array(_), Value::Array(_))
            | (Value::Object(_), Value::Object(_))
    );
    if !compatible {
        return Err(CliError::KeyType { key: key.to_string(), expected: kind_name(slot), value: raw.to_string() });
    }
    *slot = value;
    Ok(())
}

/// Dotted `key = value` configuration overrides, in command-line order.
pub type Overrides = Vec<(String, String)>;

/// Splits dotted `--a.b value` / `--a.b=value` flags from the rest of the
/// command line.
pub fn split_dotted(args: Vec<OsString>) -> Result<(Vec<OsString>, Overrides), CliError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let s = arg.to_string_lossy();
        let dotted = s.strip_prefix("--").filter(|name| name.split('=').next().is_some_and(|n| n.contains('.')));
        match dotted {
            Some(flag) => {
                let (key, value) = match flag.split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => {
                        let v = it.next().ok_or_else(|| CliError::Usage(format!("--{flag} needs a value")))?;
                        (flag.to_string(), v.to_string_lossy().into_owned())
                    }
                };
                overrides.push((key, value));
            }
            None => rest.push(arg),
        }
    }
    Ok((rest, overrides))
}

#[derive(Debug, Parser)]
#[command(name = "genderlab", version, about = "Grammatical gender experiments on controlled artificial corpora")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// exp1, exp2, exp3, exp4 or all.
    #[arg(long)]
    pub experiment: Option<String>,
    /// Number of seeds per condition.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Worker threads for independent seeds.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub master_seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON configuration file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Lexicon TSV (defaults to the bundled lexicon).
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Omit timings so that reruns reproduce identical bytes.
    #[arg(long)]
    pub deterministic: bool,
    /// Print the resolved plan without writing anything.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate one dataset bundle.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        /// Feminine NP proportion (exp4).
        #[arg(long)]
        proportion: Option<f64>,
    },
    /// Train a language model on a bundle's lm_train and lm_dev.
    TrainLm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Train a probe on a bundle's probe_train and evaluate every probe_test.
    TrainProbe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        /// Language-model checkpoint.
        #[arg(long)]
        lm: PathBuf,
    },
    /// Full pipeline over seeds for one or all experiments.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Re-render report files from a stored `report.json`.
    Report {
        /// Experiment output directory containing `report.json`.
        #[arg(long)]
        dir: PathBuf,
    },
    /// Gradient checks and grammar validation.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_experiment(s: &str) -> Result<Option<ExperimentId>, CliError> {
    if s == "all" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(CliError::Usage)
}

/// Defaults, then the config file, then dotted overrides, then named flags.
pub fn resolve_config(common: &Common, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let base = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    let mut value = serde_json::to_value(&base).expect("config serialises");
    for (k, v) in overrides {
        apply_override(&mut value, k, v)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(e) = &common.experiment {
        cfg.experiment = parse_experiment(e)?;
    }
    if let Some(v) = common.seeds {
        cfg.seeds = v;
    }
    if let Some(v) = common.jobs {
        cfg.jobs = v;
    }
    if let Some(v) = common.master_seed {
        cfg.master_seed = v;
    }
    if let Some(v) = &common.out {
        cfg.out = v.clone();
    }
    if let Some(v) = &common.lexicon {
        cfg.lexicon = Some(v.clone());
    }
    cfg.deterministic |= common.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    Ok(hex::encode(Sha256::digest(fs::read(path).map_err(io_err(path))?)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serialisable");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Hashes of every regular file under `dir` except `manifest.json` itself,
/// by relative path.
fn tree_hashes(dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(io_err(&d))? {
            let path = entry.map_err(io_err(&d))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path != dir.join("manifest.json") {
                let rel = path.strip_prefix(dir).expect("under dir").to_string_lossy().replace('\\', "/");
                out.insert(rel, sha256_file(&path)?);
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: &'a RunConfig,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    inputs: BTreeMap<String, String>,
    files: BTreeMap<String, String>,
}

fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: BTreeMap<String, String>,
) -> Result<(), CliError> {
    let files = tree_hashes(dir)?;
    write_json(&dir.join("manifest.json"), &Manifest { command, config: cfg, inputs, files })
}

fn steps_per_model(cfg: &RunConfig) -> usize {
    cfg.train.epochs * cfg.sizes.lm_train.div_ceil(cfg.train.batch_size)
}

fn plan_text(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let mut total_models = 0;
    for id in cfg.experiments() {
        let conditions = if id == ExperimentId::Exp4 { cfg.proportions.len() } else { 1 };
        let models = conditions * cfg.seeds;
        total_models += models;
        s.push_str(&format!(
            "{id}: {models} bundles, {models} language models, {models} probes -> {}\n",
            cfg.out.join(id.as_str()).display()
        ));
    }
    s.push_str(&format!(
        "total: {total_models} language models, {} optimiser steps each ({} epochs x {} batches), {} steps overall\n",
        steps_per_model(cfg),
        cfg.train.epochs,
        cfg.sizes.lm_train.div_ceil(cfg.train.batch_size),
        total_models * steps_per_model(cfg)
    ));
    s
}

fn cmd_run(cfg: &RunConfig, dry_run: bool) -> Result<(), CliError> {
    if dry_run {
        print!("{}", serde_json::to_string_pretty(cfg).expect("serialisable"));
        println!();
        print!("{}", plan_text(cfg));
        return Ok(());
    }
    let lexicon = cfg.load_lexicon()?;
    let seeds = derive_seeds(cfg.master_seed, cfg.seeds);
    let ecfg = cfg.experiment_config();
    for id in cfg.experiments() {
        let dir = cfg.out.join(id.as_str());
        log::info!("{id}: {} seed(s) into {}", seeds.len(), dir.display());
        let report = run_experiment(id, &lexicon, &seeds, cfg.master_seed, &ecfg, Some(&dir))?;
        render_report(&report, &dir)?;
        if !report.failures.is_empty() {
            log::warn!("{id}: {} run(s) failed; see {}", report.failures.len(), dir.join("report.md").display());
        }
        let single = RunConfig { experiment: Some(id), ..cfg.clone() };
        write_manifest(&dir, "run", &single, BTreeMap::new())?;
    }
    write_manifest(&cfg.out, "run", cfg, BTreeMap::new())
}

fn cmd_gen_corpus(cfg: &RunConfig, proportion: Option<f64>, dry_run: bool) -> Result<(), CliError> {
    let id = cfg.experiment.ok_or_else(|| CliError::Usage("gen-corpus needs a single --experiment".into()))?;
    let mut spec = ScenarioSpec::new(id, cfg.master_seed);
    spec.feminine_np_proportion = proportion;
    spec.sizes = cfg.sizes;
    spec.lexical = cfg.lexical;
    spec.zipf_exponent = cfg.zipf_exponent;
    if dry_run {
        println!("{}", serde_json::to_string_pretty(&spec).expect("serialisable"));
        return Ok(());
    }
    let scenario = build_scenario(&spec, &cfg.load_lexicon()?)?;
    let bundle = generate_dataset(&scenario)?;
    let manifest = write_bundle(&bundle, &cfg.out)?;
    println!("wrote {} probe_test file(s) to {}", manifest.probe_tests.len(), cfg.out.display());
    Ok(())
}

fn cmd_train_lm(cfg: &RunConfig, bundle_dir: &Path, dry_run: bool) -> Result<(), CliError> {
    if dry_run {
        println!("train {} steps on {}", steps_per_model(cfg), bundle_dir.display());
        return Ok(());
    }
    let bundle = read_bundle(bundle_dir)?;
    let train = TrainConfig { seed: seed::derive_named(cfg.master_seed, "lm"), ..cfg.train };
    let ckpt = train_lm(&bundle.lm_train.sentences, &bundle.lm_dev.sentences, &cfg.model, &train)?;
    fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    save_checkpoint(&ckpt, &cfg.out.join("lm.ckpt"))?;
    let log_path = cfg.out.join("training_log.csv");
    fs::write(&log_path, log_csv(&ckpt.log)).map_err(io_err(&log_path))?;
    let inputs =
        BTreeMap::from([("bundle/manifest.json".to_string(), sha256_file(&bundle_dir.join("manifest.json"))?)]);
    write_manifest(&cfg.out, "train-lm", cfg, inputs)?;
    println!("best epoch {} of {}", ckpt.best_epoch, ckpt.log.len());
    Ok(())
}

#[derive(Serialize)]
struct ProbeReport {
    probe_train_items: usize,
    final_loss: f64,
    tests: BTreeMap<String, ProbeMetrics>,
}

fn cmd_train_probe(cfg: &RunConfig, bundle_dir: &Path, lm: &Path, dry_run: bool) -> Result<(), CliError> {
    if dry_run {
        println!("probe {} epochs on {} with {}", cfg.probe.epochs, bundle_dir.display(), lm.display());
        return Ok(());
    }
    let bundle = read_bundle(bundle_dir)?;
    let ckpt = load_checkpoint(lm)?;
    let encoder = crate::model::Encoder::new(&ckpt);
    let train = extract_features(&encoder, &bundle.probe_train)?.labeled();
    let pcfg = ProbeTrainConfig { seed: seed::derive_named(cfg.master_seed, "probe"), ..cfg.probe };
    let probe = train_probe(&train, &pcfg)?;
    let mut tests = BTreeMap::new();
    for (name, data) in &bundle.probe_tests {
        let features = extract_features(&encoder, data)?;
        if !features.is_empty() {
            tests.insert(name.clone(), eval_probe(&probe, &features)?);
        }
    }
    save_probe(&probe, &cfg.out.join("probe.ckpt"))?;
    write_json(
        &cfg.out.join("metrics.json"),
        &ProbeReport { probe_train_items: train.len(), final_loss: probe.final_loss, tests },
    )?;
    let inputs = BTreeMap::from([
        ("bundle/manifest.json".to_string(), sha256_file(&bundle_dir.join("manifest.json"))?),
        ("lm".to_string(), sha256_file(lm)?),
    ]);
    write_manifest(&cfg.out, "train-probe", cfg, inputs)
}

fn cmd_report(dir: &Path) -> Result<(), CliError> {
    let path = dir.join(REPORT_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let report: ExperimentReport =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for p in render_report(&report, dir)? {
        println!("{}", p.display());
    }
    Ok(())
}

/// Runs the self-checks, printing one line per check.
pub fn run_checks(seed: u64) -> Vec<(String, bool, String)> {
    let mut out = Vec::new();
    let tiny = TransformerConfig { d_model: 8, layers: 2, heads: 2, d_ff: 16, dropout: 0.0, max_sequence_length: 8 };
    match gradient_check(&tiny, 12, seed) {
        Ok(r) => {
            out.push(("gradient_check".into(), r.max_relative_error < 1e-4, format!("{:.3e}", r.max_relative_error)))
        }
        Err(e) => out.push(("gradient_check".into(), false, e.to_string())),
    }
    for (name, err) in component_checks(seed) {
        out.push((format!("gradient_check/{name}"), err < 1e-4, format!("{err:.3e}")));
    }
    let mut texts = vec![
        ("exp1 lm_train", templates::EXP1_LM_TRAIN.to_string()),
        ("exp1 probe_train", templates::EXP1_PROBE_TRAIN.to_string()),
        ("exp2 lm_train", templates::EXP2_LM_TRAIN.to_string()),
        ("exp2 probe_train", templates::exp2_probe_train()),
    ];
    for x in ["Fem", "Masc", "Amb"] {
        texts.push(("exp2 probe_test", templates::exp2_probe_test(x, "50")));
    }
    for (name, text) in texts {
        let r = parse_grammar(&text);
        out.push((format!("grammar/{name}"), r.is_ok(), r.err().map_or("valid".into(), |e| e.to_string())));
    }
    let lexicon = Lexicon::bundled();
    let sizes = Sizes { lm_train: 2000, lm_dev: 100, probe_train: 200, probe_test_per_group: 100 };
    for id in ExperimentId::ALL {
        let mut spec = ScenarioSpec::new(id, seed).with_sizes(sizes);
        if id == ExperimentId::Exp4 {
            spec = spec.with_proportion(0.3);
        }
        let r = build_scenario(&spec, &lexicon).and_then(|s| generate_dataset(&s));
        let (ok, detail) = match r {
            Ok(b) => {
                let clean = b.out_of_vocabulary().is_empty() && b.probe_overlap().is_empty();
                (clean, format!("{} resolved grammars", b.grammars.len()))
            }
            Err(e) => (false, e.to_string()),
        };
        out.push((format!("bundle/{id}"), ok, detail));
    }
    out
}

fn cmd_check(seed: u64) -> Result<(), CliError> {
    let results = run_checks(seed);
    let failed = results.iter().filter(|r| !r.1).count();
    for (name, ok, detail) in &results {
        println!("{} {name}: {detail}", if *ok { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        return Err(CliError::Check(failed));
    }
    Ok(())
}

fn stage_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::GenCorpus { .. } => "gen-corpus",
        Command::TrainLm { .. } => "train-lm",
        Command::TrainProbe { .. } => "train-probe",
        Command::Run { .. } => "run",
        Command::Report { .. } => "report",
        Command::Check { .. } => "check",
    }
}

fn dispatch(cmd: &Command, overrides: &[(String, String)]) -> Result<(), CliError> {
    let resolve = |c: &Common| resolve_config(c, overrides);
    let no_overrides = || {
        if overrides.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage("this command takes no configuration overrides".into()))
        }
    };
    match cmd {
        Command::Run { common } => cmd_run(&resolve(common)?, common.dry_run),
        Command::GenCorpus { common, proportion } => cmd_gen_corpus(&resolve(common)?, *proportion, common.dry_run),
        Command::TrainLm { common, bundle } => cmd_train_lm(&resolve(common)?, bundle, common.dry_run),
        Command::TrainProbe { common, bundle, lm } => cmd_train_probe(&resolve(common)?, bundle, lm, common.dry_run),
        Command::Report { dir } => no_overrides().and_then(|_| cmd_report(dir)),
        Command::Check { seed } => no_overrides().and_then(|_| cmd_check(*seed)),
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code; errors are reported on stderr as a JSON
/// record.
pub fn main_with_args(args: Vec<OsString>) -> i32 {
    let report = |stage: &str, e: &CliError| {
        eprintln!("{}", e.record(stage));
        e.exit_code()
    };
    let (rest, overrides) = match split_dotted(args) {
        Ok(v) => v,
        Err(e) => return report("parse", &e),
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            return report("parse", &CliError::Usage(e.to_string().trim_end().to_string()));
        }
    };
    match dispatch(&cli.command, &overrides) {
        Ok(()) => EXIT_OK,
        Err(e) => report(stage_name(&cli.command), &e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn dotted_flags_are_split_out() {
        let (rest, ov) =
            split_dotted(os(&["genderlab", "run", "--train.epochs", "3", "--sizes.lm_train=50", "--seeds", "2"]))
                .unwrap();
        assert_eq!(rest, os(&["genderlab", "run", "--seeds", "2"]));
        assert_eq!(ov, vec![("train.epochs".into(), "3".into()), ("sizes.lm_train".into(), "50".into())]);
        assert!(matches!(split_dotted(os(&["x", "--train.epochs"])), Err(CliError::Usage(_))));
    }

    #[test]
    fn overrides_are_type_checked() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        apply_override(&mut v, "train.epochs", "7").unwrap();
        apply_override(&mut v, "experiment", "exp2").unwrap();
        apply_override(&mut v, "out", "some/dir").unwrap();
        apply_override(&mut v, "out", "2024").unwrap();
        assert_eq!(v["out"], "2024");
        apply_override(&mut v, "out", "some/dir").unwrap();
        let cfg: RunConfig = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.experiment, Some(ExperimentId::Exp2));
        assert_eq!(cfg.out, PathBuf::from("some/dir"));
        assert!(matches!(apply_override(&mut v, "train.epoch", "7"), Err(CliError::UnknownKey(_))));
        assert!(matches!(apply_override(&mut v, "train.epochs", "many"), Err(CliError::KeyType { .. })));
        // Kind-compatible but ill-typed values fail at deserialisation.
        apply_override(&mut v, "train.epochs", "1.5").unwrap();
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn precedence_defaults_file_overrides_flags() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        fs::write(&file, r#"{"seeds": 4, "train": {"epochs": 9}, "master_seed": 3}"#).unwrap();
        let common = Common { config: Some(file), seeds: Some(2), ..Default::default() };
        let cfg = resolve_config(&common, &[("train.epochs".into(), "5".into())]).unwrap();
        assert_eq!((cfg.seeds, cfg.train.epochs, cfg.master_seed), (2, 5, 3));
        assert_eq!(cfg.model, TransformerConfig::default());
    }

    #[test]
    fn missing_lexicon_is_a_usage_error_naming_the_path() {
        let common = Common { lexicon: Some("/no/such/lexicon.tsv".into()), ..Default::default() };
        let err = resolve_config(&common, &[]).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE);
        let rec = err.record("run");
        assert!(rec["error"]["message"].as_str().unwrap().contains("/no/such/lexicon.tsv"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(main_with_args(os(&["genderlab", "frobnicate"])), EXIT_USAGE);
        assert_eq!(main_with_args(os(&["genderlab", "run", "--experiment", "exp9"])), EXIT_USAGE);
        assert_eq!(main_with_args(os(&["genderlab", "report", "--dir", "/no/such/dir"])), EXIT_STAGE);
        assert_eq!(
            main_with_args(os(&["genderlab", "run", "--dry-run", "--experiment", "exp4", "--seeds", "5"])),
            EXIT_OK
        );
    }

    #[test]
    fn plan_counts_models() {
        let cfg = RunConfig { experiment: Some(ExperimentId::Exp4), seeds: 5, ..RunConfig::default() };
        let text = plan_text(&cfg);
        assert!(text.contains("25 language models"), "{text}");
        assert!(text.contains(&format!("{} optimiser steps", 100 * 157)), "{text}");
    }

    #[test]
    fn checks_pass() {
        let results = run_checks(1);
        assert!(results.iter().all(|r| r.1), "{results:?}");
    }
}
