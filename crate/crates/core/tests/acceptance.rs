//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Experiment artifacts are cached under the cargo target directory, so a
//! rerun only repeats the stages whose inputs changed. Set
//! `GENDERLAB_FULL_SCALE=1` to also run the 20-seed protocol.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use genderlab::corpus::{
    build_scenario, generate_dataset, read_bundle, templates, write_bundle, ExperimentId, ScenarioSpec,
};
use genderlab::experiments::{
    aggregate, degree_of_bias, derive_seeds, proportion_label, render_report, run_experiment, sample_std,
    ExperimentConfig, ExperimentReport, QUARTILE_NAMES,
};
use genderlab::grammar::{parse_grammar, validate, Pcfg};
use genderlab::lexicon::{zipf_weights, Lexicon};
use genderlab::model::{
    gradient_check, perplexity, softmax_rows, train_lm, unigram_perplexity, Batch, TrainConfig, Transformer,
    TransformerConfig,
};
use genderlab::seed;

const DESK_SEEDS: usize = 5;
const FULL_SEEDS: usize = 20;
const MASTER_SEED: u64 = 2024;
/// Dev perplexity bottoms out well before this epoch at the default model
/// size, so best-epoch selection returns the same checkpoint as a longer run.
const DESK_EPOCHS: usize = 12;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

/// Collects named sub-checks; the criterion passes when all of them do.
#[derive(Default)]
struct Checks(Vec<(String, bool)>);

impl Checks {
    fn check(&mut self, pass: bool, what: impl Into<String>) {
        self.0.push((what.into(), pass));
    }

    fn outcome(self) -> Outcome {
        let failed: Vec<&str> = self.0.iter().filter(|c| !c.1).map(|c| c.0.as_str()).collect();
        if failed.is_empty() {
            Outcome::new(true, self.0.iter().map(|c| c.0.as_str()).collect::<Vec<_>>().join("; "))
        } else {
            Outcome::new(false, format!("failed: {}", failed.join("; ")))
        }
    }
}

fn cache_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = DESK_EPOCHS;
    cfg.jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    cfg.deterministic = true;
    cfg
}

fn run(id: ExperimentId, seeds: usize, cfg: &ExperimentConfig, scale: &str) -> Result<ExperimentReport, String> {
    let dir = cache_root().join(scale).join(id.as_str());
    let t = Instant::now();
    let report =
        run_experiment(id, &Lexicon::bundled(), &derive_seeds(MASTER_SEED, seeds), MASTER_SEED, cfg, Some(&dir))
            .map_err(|e| e.to_string())?;
    render_report(&report, &dir).map_err(|e| e.to_string())?;
    eprintln!(
        "{id} ({scale}, {seeds} seeds) finished in {:.0}s; report in {}",
        t.elapsed().as_secs_f64(),
        dir.display()
    );
    Ok(report)
}

fn mean(report: &ExperimentReport, row: &str, column: &str) -> f64 {
    report.aggregate(row, column).map_or(f64::NAN, |a| a.mean)
}

fn complete(report: &ExperimentReport, checks: &mut Checks) {
    checks.check(report.failures.is_empty() && !report.shortfall, format!("{} runs, no failures", report.runs.len()));
}

fn exp1_checks(report: &ExperimentReport) -> Outcome {
    let mut c = Checks::default();
    complete(report, &mut c);
    let aa = mean(report, "ambiguous", "ambiguous");
    let ag = mean(report, "ambiguous", "gendered");
    let ga = mean(report, "gendered", "ambiguous");
    let gg = mean(report, "gendered", "gendered");
    c.check((45.0..=55.0).contains(&aa), format!("ambiguous/ambiguous {aa:.2} in [45, 55]"));
    c.check(ag >= 90.0, format!("ambiguous-train/gendered-test {ag:.2} >= 90"));
    c.check(ga >= 95.0, format!("gendered-train/ambiguous-test {ga:.2} >= 95"));
    c.check(gg >= 99.0, format!("gendered/gendered {gg:.2} >= 99"));
    c.outcome()
}

fn exp2_checks(report: &ExperimentReport) -> Outcome {
    let mut c = Checks::default();
    complete(report, &mut c);
    let rows = ["Masc", "25", "50", "75", "Fem"];
    for row in rows {
        let f = mean(report, row, "feminine");
        let m = mean(report, row, "masculine");
        c.check(f >= 95.0, format!("{row} feminine-context {f:.2} >= 95"));
        c.check(m <= 5.0, format!("{row} masculine-context {m:.2} <= 5"));
    }
    let amb: Vec<f64> = rows.iter().map(|r| mean(report, r, "ambiguous")).collect();
    let text = amb.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" < ");
    c.check(amb.windows(2).all(|w| w[0] < w[1]), format!("ambiguous strictly increasing {text}"));
    c.check((50.0..=72.0).contains(&amb[3]), format!("75% category ambiguous {:.2} in [50, 72]", amb[3]));
    c.outcome()
}

fn exp3_checks(report: &ExperimentReport) -> Outcome {
    let mut c = Checks::default();
    complete(report, &mut c);
    let amb: Vec<f64> = QUARTILE_NAMES.iter().map(|q| mean(report, q, "ambiguous")).collect();
    let gen: Vec<f64> = QUARTILE_NAMES.iter().map(|q| mean(report, q, "gendered")).collect();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/");
    c.check(
        amb.windows(2).all(|w| w[1] >= w[0] - 1.0),
        format!("ambiguous non-decreasing within 1 point {}", fmt(&amb)),
    );
    c.check(amb[3] - amb[0] >= 1.5, format!("very frequent - very rare {:.2} >= 1.5", amb[3] - amb[0]));
    c.check(gen.iter().all(|&g| g >= 96.0), format!("gendered {} all >= 96", fmt(&gen)));
    let spread = gen.iter().cloned().fold(f64::MIN, f64::max) - gen.iter().cloned().fold(f64::MAX, f64::min);
    c.check(spread <= 2.0, format!("gendered spread {spread:.2} <= 2"));
    c.outcome()
}

fn exp4_checks(report: &ExperimentReport, seeds: usize) -> Outcome {
    let mut c = Checks::default();
    complete(report, &mut c);
    let expected = report.config.proportions.len() * seeds;
    let biases: Vec<(f64, f64)> =
        report.runs.iter().filter_map(|r| r.bias.as_ref()).map(|b| (b.feminine_proportion, b.degree_of_bias)).collect();
    c.check(biases.len() == expected, format!("{} bias records (expected {expected})", biases.len()));
    c.check(biases.iter().all(|b| (-1.0..=1.0).contains(&b.1)), "every degree_of_bias in [-1, 1]");
    let dir = tempfile::tempdir().expect("tempdir");
    let points = render_report(report, dir.path())
        .ok()
        .and_then(|_| fs::read_to_string(dir.path().join("figure_data.csv")).ok())
        .map_or(0, |s| s.lines().skip(1).filter(|l| !l.is_empty()).count());
    c.check(points == expected, format!("figure_data.csv has {points} points"));
    for &p in &report.config.proportions {
        let values: Vec<f64> = biases.iter().filter(|b| b.0 == p).map(|b| b.1).collect();
        let sd = sample_std(&values);
        c.check(sd > 0.0, format!("p={} sd {sd:.3} > 0", proportion_label(p)));
    }
    c.outcome()
}

fn criterion_formulas() -> Outcome {
    let mut c = Checks::default();
    let bias = |m, t| degree_of_bias(m, t).unwrap_or(f64::NAN);
    c.check(bias(50, 100) == 0.0, "bias(50,100) = 0");
    c.check(bias(100, 100) == 1.0, "bias(100,100) = 1");
    c.check(bias(0, 100) == -1.0, "bias(0,100) = -1");
    c.check((bias(60, 100) - 0.2).abs() < 1e-12, "bias(60,100) = 0.2");
    match aggregate(&[0.0, 1.0]) {
        Ok(a) => c.check(a.mean == 0.5 && (a.ci_halfwidth - 0.98).abs() < 1e-12, "aggregate([0,1]) = 0.5 ±0.98"),
        Err(e) => c.check(false, format!("aggregate([0,1]): {e}")),
    }
    let z = zipf_weights(4, 1.0);
    let expected = [12.0 / 25.0, 6.0 / 25.0, 4.0 / 25.0, 3.0 / 25.0];
    c.check(z.len() == 4 && z.iter().zip(expected).all(|(a, b)| (a - b).abs() < 1e-12), "Zipf(4, s=1)");
    c.outcome()
}

fn memorization() -> Result<f64, String> {
    let sentences: Vec<String> = (0..10).map(|i| format!("w{} v{} w{} x{} .", i, i % 3, (i * 7) % 10, i % 4)).collect();
    let model =
        TransformerConfig { d_model: 64, layers: 2, heads: 4, d_ff: 128, dropout: 0.0, max_sequence_length: 16 };
    let train = TrainConfig { epochs: 200, learning_rate: 3e-3, batch_size: 10, seed: 7, ..TrainConfig::default() };
    let ckpt = train_lm(&sentences, &sentences, &model, &train).map_err(|e| e.to_string())?;
    perplexity(&ckpt, &sentences).map_err(|e| e.to_string())
}

fn criterion_numerics(exp1: Option<&ExperimentReport>) -> Outcome {
    let mut c = Checks::default();
    let tiny = TransformerConfig { d_model: 8, layers: 2, heads: 2, d_ff: 16, dropout: 0.0, max_sequence_length: 8 };
    match gradient_check(&tiny, 12, 3) {
        Ok(r) => c.check(r.max_relative_error < 1e-4, format!("gradient check {:.2e} < 1e-4", r.max_relative_error)),
        Err(e) => c.check(false, format!("gradient check: {e}")),
    }

    let cfg = TransformerConfig { dropout: 0.3, ..TransformerConfig::default() };
    let mut rng = seed::rng(5);
    let model: Transformer<f32> = Transformer::init(cfg, 60, &mut rng).expect("valid config");
    let batch = Batch::new(&[vec![5u32, 9, 12, 4, 40], vec![7, 7, 30]]);
    let fwd = model.forward(&batch, Some(&mut rng)).expect("forward");
    let mut probs = fwd.logits.clone();
    softmax_rows(&mut probs, 60);
    let mut worst = probs.chunks(60).map(|r| (r.iter().sum::<f32>() - 1.0).abs()).fold(0.0f32, f32::max);
    for layer in 0..fwd.layers() {
        for row in fwd.attention_rows(layer, &batch, cfg.heads) {
            worst = worst.max((row.iter().sum::<f32>() - 1.0).abs());
        }
    }
    c.check(worst < 1e-5, format!("softmax rows sum to 1 (worst {worst:.1e})"));

    let model: Transformer<f64> = Transformer::init(tiny, 12, &mut seed::rng(6)).expect("valid config");
    let a = model.forward::<rand_chacha::ChaCha8Rng>(&Batch::new(&[vec![4u32, 5, 6, 7]]), None).expect("forward");
    let b = model.forward::<rand_chacha::ChaCha8Rng>(&Batch::new(&[vec![4u32, 5, 9, 2]]), None).expect("forward");
    // Positions 0..=2 read BOS 4 5 in both sequences.
    c.check(a.logits[..3 * 12] == b.logits[..3 * 12] && a.logits[3 * 12..] != b.logits[3 * 12..], "causal masking");

    match memorization() {
        Ok(ppl) => c.check(ppl < 1.5, format!("10-sentence memorization ppl {ppl:.3} < 1.5")),
        Err(e) => c.check(false, format!("memorization: {e}")),
    }

    match exp1 {
        Some(report) => {
            for r in &report.runs {
                let bundle = cache_root().join("desk/exp1/runs").join(r.plan.name()).join("bundle");
                match read_bundle(&bundle).map_err(|e| e.to_string()).and_then(|b| {
                    unigram_perplexity(&b.lm_train.sentences, &b.lm_dev.sentences).map_err(|e| e.to_string())
                }) {
                    Ok(u) => c.check(
                        r.lm_dev_perplexity < u,
                        format!("{} dev ppl {:.2} < unigram {u:.2}", r.plan.name(), r.lm_dev_perplexity),
                    ),
                    Err(e) => c.check(false, format!("{}: {e}", r.plan.name())),
                }
            }
        }
        None => c.check(false, "no trained exp1 language models"),
    }
    c.outcome()
}

/// Largest |observed − p| / σ over every rule of a nonterminal with more
/// than one alternative, from `n` sampled sentences.
fn rule_frequency_z(pcfg: &Pcfg, n: usize, seed: u64) -> f64 {
    let mut counts = vec![0u64; pcfg.rules().len()];
    let mut rng = seed::rng(seed);
    for _ in 0..n {
        for r in pcfg.sample(&mut rng).rules() {
            counts[r.0 as usize] += 1;
        }
    }
    let mut worst: f64 = 0.0;
    for lhs in pcfg.nonterminals() {
        let ids = pcfg.rules_for(lhs);
        if ids.len() < 2 {
            continue;
        }
        let total: u64 = ids.iter().map(|r| counts[r.0 as usize]).sum();
        if total == 0 {
            continue;
        }
        for r in ids {
            let p = pcfg.rule(*r).probability;
            let sigma = (p * (1.0 - p) / total as f64).sqrt();
            let observed = counts[r.0 as usize] as f64 / total as f64;
            worst = worst.max((observed - p).abs() / sigma);
        }
    }
    worst
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).expect("readable dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).expect("prefix").to_path_buf(), fs::read(&p).expect("readable"));
            }
        }
    }
    out
}

fn criterion_generation() -> Outcome {
    let mut c = Checks::default();
    let mut grammars: Vec<(String, String)> = vec![
        ("exp1 lm_train".into(), templates::EXP1_LM_TRAIN.into()),
        ("exp1 probe_train".into(), templates::EXP1_PROBE_TRAIN.into()),
        ("exp2 lm_train".into(), templates::EXP2_LM_TRAIN.into()),
        ("exp2 probe_train".into(), templates::exp2_probe_train()),
    ];
    for xy in ["GU", "AU"] {
        for (fem, gendered) in [(true, true), (true, false), (false, true), (false, false)] {
            grammars.push((format!("exp1 probe_test {xy}"), templates::exp1_probe_test(xy, fem, gendered)));
        }
    }
    for x in ["Fem", "Masc", "Amb"] {
        for y in ["Masc", "25", "50", "75", "Fem"] {
            grammars.push((format!("exp2 probe_test {x}/{y}"), templates::exp2_probe_test(x, y)));
        }
    }
    let bad: Vec<String> = grammars
        .iter()
        .filter(|(_, text)| !parse_grammar(text).map(|g| validate(&g).is_valid()).unwrap_or(false))
        .map(|(name, _)| name.clone())
        .collect();
    c.check(bad.is_empty(), format!("{} grammar templates parse and validate {bad:?}", grammars.len()));

    let lexicon = Lexicon::bundled();
    for id in [ExperimentId::Exp1, ExperimentId::Exp2] {
        match build_scenario(&ScenarioSpec::new(id, 11), &lexicon) {
            Ok(s) => {
                let z = rule_frequency_z(&s.lm_grammar, 100_000, 12);
                c.check(z <= 4.0, format!("{id} lm rule frequencies within {z:.2} sigma"));
            }
            Err(e) => c.check(false, format!("{id} scenario: {e}")),
        }
    }
    if let Ok(g) = parse_grammar(&templates::exp2_probe_train()) {
        let z = rule_frequency_z(&g, 100_000, 13);
        c.check(z <= 4.0, format!("exp2 probe_train rule frequencies within {z:.2} sigma"));
    }

    let lm = parse_grammar(templates::EXP1_LM_TRAIN).expect("checked above");
    let mut rng = seed::rng(14);
    let n = 1_000_000;
    let nouns: usize =
        (0..n).map(|_| lm.sample(&mut rng).tokens(&lm).iter().filter(|t| t.starts_with("NOUN")).count()).sum();
    let per_sentence = nouns as f64 / n as f64;
    // Nouns per NP solve m = 0.8 + 0.2 · 2m, so m = 4/3 and a sentence holds 1.5 NPs.
    c.check((per_sentence - 2.0).abs() <= 0.02, format!("{per_sentence:.4} nouns per sentence"));

    let mut clean = true;
    for id in ExperimentId::ALL {
        let mut spec = ScenarioSpec::new(id, 21);
        if id == ExperimentId::Exp4 {
            spec = spec.with_proportion(0.2);
        }
        let bundle = match build_scenario(&spec, &lexicon).and_then(|s| generate_dataset(&s)) {
            Ok(b) => b,
            Err(e) => {
                c.check(false, format!("{id} bundle: {e}"));
                continue;
            }
        };
        let oov = bundle.out_of_vocabulary();
        let overlap = bundle.probe_overlap();
        clean &= oov.is_empty() && overlap.is_empty();
        for (role, text) in &bundle.grammars {
            if parse_grammar(text).is_err() {
                c.check(false, format!("{id} resolved {role} invalid"));
            }
        }
        let (a, b) = (tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir"));
        let again = build_scenario(&spec, &lexicon).and_then(|s| generate_dataset(&s)).expect("generated once");
        let same = write_bundle(&bundle, a.path()).is_ok()
            && write_bundle(&again, b.path()).is_ok()
            && files_under(a.path()) == files_under(b.path());
        c.check(same, format!("{id} byte-identical regeneration"));
    }
    c.check(clean, "OOV containment and probe/test disjointness on every bundle");
    c.outcome()
}

fn main() {
    let _ =
        env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).is_test(true).try_init();
    let full = std::env::var("GENDERLAB_FULL_SCALE").is_ok_and(|v| v == "1");
    let cfg = desk_config();
    let mut results: Vec<(u8, &str, Option<Outcome>)> = Vec::new();
    let mut report = |n: u8, name: &'static str, o: Option<Outcome>| {
        match &o {
            Some(o) => eprintln!("criterion {n} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail),
            None => eprintln!("criterion {n} {name}: SKIP"),
        }
        results.push((n, name, o));
    };

    report(5, "formula exactness", Some(criterion_formulas()));
    report(7, "generation properties", Some(criterion_generation()));

    let exp1 = run(ExperimentId::Exp1, DESK_SEEDS, &cfg, "desk");
    report(1, "exp1 reproduction", Some(exp1.as_ref().map_or_else(|e| Outcome::new(false, e.clone()), exp1_checks)));
    report(6, "numerical core", Some(criterion_numerics(exp1.as_ref().ok())));
    let exp2 = run(ExperimentId::Exp2, DESK_SEEDS, &cfg, "desk");
    report(2, "exp2 reproduction", Some(exp2.as_ref().map_or_else(|e| Outcome::new(false, e.clone()), exp2_checks)));
    let exp3 = run(ExperimentId::Exp3, DESK_SEEDS, &cfg, "desk");
    report(3, "exp3 reproduction", Some(exp3.as_ref().map_or_else(|e| Outcome::new(false, e.clone()), exp3_checks)));
    let exp4 = run(ExperimentId::Exp4, DESK_SEEDS, &cfg, "desk");
    report(
        4,
        "exp4 pipeline",
        Some(exp4.as_ref().map_or_else(|e| Outcome::new(false, e.clone()), |r| exp4_checks(r, DESK_SEEDS))),
    );

    let full_outcome = full.then(|| {
        let mut c = Checks::default();
        for id in ExperimentId::ALL {
            match run(id, FULL_SEEDS, &cfg, "full") {
                Ok(r) => {
                    let o = match id {
                        ExperimentId::Exp1 => exp1_checks(&r),
                        ExperimentId::Exp2 => exp2_checks(&r),
                        ExperimentId::Exp3 => exp3_checks(&r),
                        ExperimentId::Exp4 => exp4_checks(&r, FULL_SEEDS),
                    };
                    c.check(o.pass, format!("{id}: {}", o.detail));
                }
                Err(e) => c.check(false, format!("{id}: {e}")),
            }
        }
        c.outcome()
    });
    report(8, "20-seed protocol (GENDERLAB_FULL_SCALE=1)", full_outcome);

    results.sort_by_key(|r| r.0);
    println!("\nacceptance summary");
    let mut failed = 0;
    for (n, name, o) in &results {
        let status = match o {
            Some(o) if o.pass => "PASS",
            Some(_) => {
                failed += 1;
                "FAIL"
            }
            None => "SKIP",
        };
        println!("criterion {n} {status} {name}");
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
