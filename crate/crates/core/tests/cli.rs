use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--model.d_model=16",
    "--model.d_ff=32",
    "--model.heads=2",
    "--model.layers=1",
    "--train.epochs=2",
    "--sizes.lm_train=400",
    "--sizes.lm_dev=50",
    "--sizes.probe_train=120",
    "--sizes.probe_test_per_group=40",
    "--probe.epochs=40",
];

fn genderlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genderlab")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stderr_record(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).unwrap_or_else(|| panic!("no JSON record in {text}"));
    serde_json::from_str(line).unwrap()
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn help_lists_subcommands() {
    let out = genderlab(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["gen-corpus", "train-lm", "train-probe", "run", "report", "check"] {
        assert!(text.contains(cmd), "{cmd} missing from {text}");
    }
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = genderlab(&["run", "--dry-run", "--seeds", "3", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    // exp1..exp3 at 3 seeds each plus exp4 at 5 proportions × 3 seeds.
    assert!(text.contains("total: 24 language models"), "{text}");
    assert!(!out_dir.exists());
}

#[test]
fn config_errors_exit_one_with_a_record() {
    let out = genderlab(&["run", "--train.epochz", "3"]);
    assert_eq!(out.status.code(), Some(1));
    let rec = stderr_record(&out);
    assert_eq!(rec["error"]["kind"], "config");
    assert!(rec["error"]["message"].as_str().unwrap().contains("train.epochz"));

    let out = genderlab(&["run", "--train.epochs", "ten"]);
    assert_eq!(out.status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"epochs": 5, "bogus": 1}}"#).unwrap();
    let out = genderlab(&["run", "--dry-run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn stage_failures_exit_two_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-bundle");
    let out = genderlab(&["train-lm", "--bundle", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let rec = stderr_record(&out);
    assert_eq!(rec["error"]["stage"], "train-lm");
    assert!(rec["error"]["path"].as_str().unwrap().starts_with(missing.to_str().unwrap()));
}

#[test]
fn staged_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let with = |base: &[&str]| -> Vec<String> {
        base.iter().map(|s| s.to_string()).chain(TINY.iter().map(|s| s.to_string())).collect()
    };
    let run = |args: Vec<String>| {
        let out = Command::new(env!("CARGO_BIN_EXE_genderlab")).args(&args).env("RUST_LOG", "warn").output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(with(&["gen-corpus", "--experiment", "exp1", "--out", &p("bundle")]));
    for f in ["manifest.json", "lm_train.txt", "lm_train.tsv", "probe_train.tsv"] {
        assert!(dir.path().join("bundle").join(f).exists(), "{f}");
    }
    run(with(&["train-lm", "--bundle", &p("bundle"), "--out", &p("lm")]));
    run(with(&["train-probe", "--bundle", &p("bundle"), "--lm", &p("lm/lm.ckpt"), "--out", &p("probe")]));
    for f in ["lm/lm.ckpt", "lm/training_log.csv", "lm/manifest.json", "probe/probe.ckpt", "probe/metrics.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let metrics: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("probe/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["tests"].as_object().unwrap().len(), 8);
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("probe/manifest.json")).unwrap()).unwrap();
    assert!(manifest["files"]["probe.ckpt"].as_str().unwrap().len() == 64);
    assert_eq!(manifest["config"]["probe"]["epochs"], 40);
}

#[test]
fn deterministic_runs_are_byte_identical_and_rerenderable() {
    let dir = tempfile::tempdir().unwrap();
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let mut args =
            vec!["run", "--experiment", "exp2", "--seeds", "2", "--deterministic", "--out", out_dir.to_str().unwrap()];
        args.extend_from_slice(TINY);
        let out = genderlab(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let mut tree = files(&out_dir.join("exp2"));
        // The manifests record the output path itself.
        tree.remove(Path::new("manifest.json"));
        trees.push(tree);
    }
    assert_eq!(trees[0], trees[1]);
    for f in ["report.json", "report.md", "aggregate.csv", "figure_data.csv", "seed-00.json", "seed-01.json"] {
        assert!(trees[0].contains_key(Path::new(f)), "{f}");
    }

    let exp = dir.path().join("a/exp2");
    let before = fs::read(exp.join("report.md")).unwrap();
    fs::remove_file(exp.join("report.md")).unwrap();
    let out = genderlab(&["report", "--dir", exp.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(fs::read(exp.join("report.md")).unwrap(), before);
}

#[test]
fn check_passes() {
    let out = genderlab(&["check"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).lines().all(|l| l.starts_with("PASS")));
}
