use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generate::role_seed;
use super::{CorpusError, Dataset, DatasetBundle, NounAnnotation, ScenarioSpec};

pub const MANIFEST_VERSION: u32 = 1;
const TSV_HEADER: &str = "sentence_index\ttoken_index\tsurface\tgroup\tcontext\tgold_gender";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub version: u32,
    pub spec: ScenarioSpec,
    /// Sampling seed per dataset role.
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of each resolved grammar file, by role.
    pub grammars: BTreeMap<String, String>,
    /// SHA-256 of every data file, by path relative to the bundle root.
    pub files: BTreeMap<String, String>,
    pub probe_tests: Vec<String>,
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn grammar_path(role: &str) -> String {
    format!("grammars/{role}.pcfg")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

fn sentences_text(d: &Dataset) -> String {
    d.sentences.iter().map(|s| format!("{s}\n")).collect()
}

fn annotations_text(d: &Dataset) -> String {
    let mut out = format!("{TSV_HEADER}\n");
    for a in &d.annotations {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            a.sentence_index,
            a.token_index,
            a.surface,
            a.group,
            a.context.as_str(),
            a.gold_gender.as_str()
        ));
    }
    out
}

fn parse_annotations(text: &str, path: &Path) -> Result<Vec<NounAnnotation>, CorpusError> {
    let format = |line: usize, message: String| CorpusError::Format { path: path.to_path_buf(), line, message };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if n == 0 {
            if line != TSV_HEADER {
                return Err(format(1, "missing annotation header".into()));
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(format(n + 1, format!("expected 6 columns, found {}", cols.len())));
        }
        let index = |s: &str| s.parse::<usize>().map_err(|e| format(n + 1, e.to_string()));
        out.push(NounAnnotation {
            sentence_index: index(cols[0])?,
            token_index: index(cols[1])?,
            surface: cols[2].to_string(),
            group: cols[3].to_string(),
            context: cols[4].parse().map_err(|e| format(n + 1, e))?,
            gold_gender: cols[5].parse().map_err(|e| format(n + 1, e))?,
        });
    }
    Ok(out)
}

/// Writes the bundle under `dir` and returns its manifest.
pub fn write_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<BundleManifest, CorpusError> {
    let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut datasets: Vec<(String, &Dataset)> = vec![
        ("lm_train".into(), &bundle.lm_train),
        ("lm_dev".into(), &bundle.lm_dev),
        ("probe_train".into(), &bundle.probe_train),
    ];
    for (k, d) in &bundle.probe_tests {
        datasets.push((format!("probe_test/{k}"), d));
    }
    for (role, d) in &datasets {
        files.insert(format!("{role}.txt"), sentences_text(d).into_bytes());
        files.insert(format!("{role}.tsv"), annotations_text(d).into_bytes());
    }
    let mut grammars = BTreeMap::new();
    for (role, text) in &bundle.grammars {
        grammars.insert(role.clone(), sha256_hex(text.as_bytes()));
        files.insert(grammar_path(role), text.clone().into_bytes());
    }

    let mut manifest = BundleManifest {
        version: MANIFEST_VERSION,
        spec: bundle.spec.clone(),
        seeds: datasets.iter().map(|(r, _)| (r.clone(), role_seed(bundle.spec.master_seed, r))).collect(),
        grammars,
        files: BTreeMap::new(),
        probe_tests: bundle.probe_tests.keys().cloned().collect(),
    };
    for (rel, bytes) in &files {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, bytes).map_err(io_err(&path))?;
        if !rel.starts_with("grammars/") {
            manifest.files.insert(rel.clone(), sha256_hex(bytes));
        }
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CorpusError::Manifest(e.to_string()))?;
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

fn read_checked(dir: &Path, rel: &str, expected: &str) -> Result<String, CorpusError> {
    let path = dir.join(rel);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let actual = sha256_hex(&bytes);
    if actual != expected {
        return Err(CorpusError::Corruption { path: rel.to_string(), expected: expected.to_string(), actual });
    }
    String::from_utf8(bytes).map_err(|e| CorpusError::Format { path, line: 0, message: e.to_string() })
}

/// Reads a bundle written by [`write_bundle`], verifying every recorded hash.
pub fn read_bundle(dir: &Path) -> Result<DatasetBundle, CorpusError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: BundleManifest = serde_json::from_str(&text).map_err(|e| CorpusError::Manifest(e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(CorpusError::Manifest(format!(
            "bundle version {} is not supported (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    let dataset = |role: &str| -> Result<Dataset, CorpusError> {
        let txt = format!("{role}.txt");
        let tsv = format!("{role}.tsv");
        let hash = |rel: &str| {
            manifest.files.get(rel).cloned().ok_or_else(|| CorpusError::Manifest(format!("no entry for {rel}")))
        };
        let sentences = read_checked(dir, &txt, &hash(&txt)?)?.lines().map(str::to_string).collect();
        let annotations = parse_annotations(&read_checked(dir, &tsv, &hash(&tsv)?)?, &PathBuf::from(&tsv))?;
        Ok(Dataset { sentences, annotations })
    };
    let mut probe_tests = BTreeMap::new();
    for key in &manifest.probe_tests {
        probe_tests.insert(key.clone(), dataset(&format!("probe_test/{key}"))?);
    }
    let mut grammars = BTreeMap::new();
    for (role, hash) in &manifest.grammars {
        grammars.insert(role.clone(), read_checked(dir, &grammar_path(role), hash)?);
    }
    Ok(DatasetBundle {
        spec: manifest.spec.clone(),
        grammars,
        lm_train: dataset("lm_train")?,
        lm_dev: dataset("lm_dev")?,
        probe_train: dataset("probe_train")?,
        probe_tests,
    })
}
