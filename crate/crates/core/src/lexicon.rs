//! Gendered vocabulary: lexicon files, CoNLL-U extraction, Zipfian
//! category weights and experiment-specific noun groups.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// The lexicon shipped with the crate.
pub const BUNDLED_LEXICON: &str = include_str!("../data/lexicon.tsv");

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: malformed entry: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unknown part of speech `{token}`")]
    UnknownPos { line: usize, token: String },
    #[error("line {line}: unknown gender `{token}`")]
    UnknownGender { line: usize, token: String },
    #[error("duplicate surface form `{surface}`")]
    DuplicateSurface { surface: String },
    #[error("{pos} `{surface}` cannot have gender {gender}")]
    InvalidGender { surface: String, pos: Pos, gender: Gender },
    #[error("empty word list")]
    EmptyWordList,
    #[error("Zipf exponent must be positive, got {0}")]
    InvalidExponent(f64),
    #[error("need {needed} {gender} {pos}s but the lexicon has {available}")]
    Insufficient { pos: Pos, gender: Gender, needed: usize, available: usize },
    #[error("partition size {0} is not supported by this scheme")]
    InvalidPartitionSize(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pos {
    Noun,
    Adjective,
    Verb,
    Preposition,
    Determiner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Feminine,
    Masculine,
    Epicene,
    None,
}

impl Pos {
    pub fn as_str(self) -> &'static str {
        match self {
            Pos::Noun => "noun",
            Pos::Adjective => "adjective",
            Pos::Verb => "verb",
            Pos::Preposition => "preposition",
            Pos::Determiner => "determiner",
        }
    }

    pub fn allows(self, gender: Gender) -> bool {
        match self {
            Pos::Verb | Pos::Preposition => gender == Gender::None,
            Pos::Noun | Pos::Adjective | Pos::Determiner => gender != Gender::None,
        }
    }
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Feminine => "feminine",
            Gender::Masculine => "masculine",
            Gender::Epicene => "epicene",
            Gender::None => "none",
        }
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pos {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        Ok(match s {
            "noun" => Pos::Noun,
            "adjective" => Pos::Adjective,
            "verb" => Pos::Verb,
            "preposition" => Pos::Preposition,
            "determiner" => Pos::Determiner,
            _ => return Err(()),
        })
    }
}

impl FromStr for Gender {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        Ok(match s {
            "feminine" => Gender::Feminine,
            "masculine" => Gender::Masculine,
            "epicene" => Gender::Epicene,
            "none" => Gender::None,
            _ => return Err(()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LexEntry {
    pub surface: String,
    pub pos: Pos,
    pub gender: Gender,
}

/// A word inventory with globally unique surface forms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    entries: Vec<LexEntry>,
    index: HashMap<String, usize>,
}

impl Lexicon {
    pub fn from_entries(entries: Vec<LexEntry>) -> Result<Self, LexiconError> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.surface.is_empty() || e.surface.chars().any(|c| c.is_whitespace() || c == '"') {
                return Err(LexiconError::Malformed {
                    line: i + 1,
                    message: format!("invalid surface form {:?}", e.surface),
                });
            }
            if !e.pos.allows(e.gender) {
                return Err(LexiconError::InvalidGender { surface: e.surface.clone(), pos: e.pos, gender: e.gender });
            }
            if index.insert(e.surface.clone(), i).is_some() {
                return Err(LexiconError::DuplicateSurface { surface: e.surface.clone() });
            }
        }
        Ok(Self { entries, index })
    }

    pub fn bundled() -> Self {
        Self::parse_tsv(BUNDLED_LEXICON).expect("bundled lexicon is valid")
    }

    /// Parses `surface<TAB>pos<TAB>gender` lines; `#` starts a comment line.
    pub fn parse_tsv(text: &str) -> Result<Self, LexiconError> {
        let mut entries = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let trimmed = raw.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = trimmed.split('\t').collect();
            if cols.len() != 3 {
                return Err(LexiconError::Malformed {
                    line,
                    message: format!("expected 3 tab-separated columns, found {}", cols.len()),
                });
            }
            let surface = cols[0].trim();
            let pos: Pos = cols[1]
                .trim()
                .parse()
                .map_err(|_| LexiconError::UnknownPos { line, token: cols[1].trim().to_string() })?;
            let gender: Gender = cols[2]
                .trim()
                .parse()
                .map_err(|_| LexiconError::UnknownGender { line, token: cols[2].trim().to_string() })?;
            if surface.is_empty() || surface.chars().any(char::is_whitespace) {
                return Err(LexiconError::Malformed { line, message: "empty or spaced surface form".into() });
            }
            if seen.insert(surface.to_string(), line).is_some() {
                return Err(LexiconError::DuplicateSurface { surface: surface.to_string() });
            }
            entries.push(LexEntry { surface: surface.to_string(), pos, gender });
        }
        Self::from_entries(entries)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# surface\tpos\tgender\n");
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.surface, e.pos, e.gender));
        }
        out
    }

    pub fn entries(&self) -> &[LexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, surface: &str) -> Option<&LexEntry> {
        self.index.get(surface).map(|&i| &self.entries[i])
    }

    pub fn count(&self, pos: Pos) -> usize {
        self.entries.iter().filter(|e| e.pos == pos).count()
    }

    /// Surface forms of one part of speech and gender, in lexicon order.
    pub fn words(&self, pos: Pos, gender: Gender) -> Vec<&str> {
        self.entries.iter().filter(|e| e.pos == pos && e.gender == gender).map(|e| e.surface.as_str()).collect()
    }

    /// Seeded choice of `n` words without replacement.
    pub fn choose(&self, pos: Pos, gender: Gender, n: usize, seed: u64) -> Result<Vec<String>, LexiconError> {
        let mut pool = self.words(pos, gender);
        if pool.len() < n {
            return Err(LexiconError::Insufficient { pos, gender, needed: n, available: pool.len() });
        }
        pool.shuffle(&mut seed::rng(seed));
        Ok(pool[..n].iter().map(|s| s.to_string()).collect())
    }
}

pub fn load_lexicon(path: &Path) -> Result<Lexicon, LexiconError> {
    let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io { path: path.to_path_buf(), source })?;
    Lexicon::parse_tsv(&text)
}

pub fn write_lexicon(lexicon: &Lexicon, path: &Path) -> Result<(), LexiconError> {
    std::fs::write(path, lexicon.to_tsv()).map_err(|source| LexiconError::Io { path: path.to_path_buf(), source })
}

/// Outcome of a CoNLL-U extraction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConlluReport {
    pub tokens: usize,
    /// NOUN/ADJ/DET tokens without a usable `Gender=` feature.
    pub skipped_ungendered: usize,
    /// Lemmas already seen with another part of speech or gender.
    pub conflicts: usize,
    /// Line numbers that did not have ten columns.
    pub malformed_lines: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ConlluExtraction {
    pub lexicon: Lexicon,
    pub report: ConlluReport,
}

pub fn extract_from_conllu(path: &Path) -> Result<ConlluExtraction, LexiconError> {
    let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io { path: path.to_path_buf(), source })?;
    extract_from_conllu_str(&text)
}

fn conllu_gender(feats: &str) -> Option<Gender> {
    feats.split('|').find_map(|kv| match kv.split_once('=') {
        Some(("Gender", "Fem")) => Some(Gender::Feminine),
        Some(("Gender", "Masc")) => Some(Gender::Masculine),
        _ => None,
    })
}

pub fn extract_from_conllu_str(text: &str) -> Result<ConlluExtraction, LexiconError> {
    let mut report = ConlluReport::default();
    let mut entries: Vec<LexEntry> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            log::warn!("conllu line {}: expected 10 columns, found {}", n + 1, cols.len());
            report.malformed_lines.push(n + 1);
            continue;
        }
        // Multiword ranges and empty nodes carry no lexical analysis.
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        report.tokens += 1;
        let pos = match cols[3] {
            "NOUN" => Pos::Noun,
            "ADJ" => Pos::Adjective,
            "VERB" => Pos::Verb,
            "ADP" => Pos::Preposition,
            "DET" => Pos::Determiner,
            _ => continue,
        };
        let gender = match pos {
            Pos::Verb | Pos::Preposition => Gender::None,
            _ => match conllu_gender(cols[5]) {
                Some(g) => g,
                None => {
                    report.skipped_ungendered += 1;
                    continue;
                }
            },
        };
        let lemma = if cols[2] == "_" { cols[1] } else { cols[2] }.to_lowercase();
        if lemma.is_empty() || lemma.chars().any(|c| c.is_whitespace() || c == '"') {
            continue;
        }
        match seen.get(&lemma) {
            Some(&i) => {
                if entries[i].pos != pos || entries[i].gender != gender {
                    report.conflicts += 1;
                }
            }
            None => {
                seen.insert(lemma.clone(), entries.len());
                entries.push(LexEntry { surface: lemma, pos, gender });
            }
        }
    }
    Ok(ConlluExtraction { lexicon: Lexicon::from_entries(entries)?, report })
}

/// Normalized Zipf weights `(1/r^s)/H` for ranks 1..=n.
pub fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-s)).collect();
    let h: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / h).collect()
}

/// Shuffles `words` with `seed`, then gives the rank-r word probability
/// `(1/r^s)/H`.
pub fn assign_zipf(words: &[String], s: f64, seed: u64) -> Result<Vec<(String, f64)>, LexiconError> {
    if words.is_empty() {
        return Err(LexiconError::EmptyWordList);
    }
    if !(s > 0.0 && s.is_finite()) {
        return Err(LexiconError::InvalidExponent(s));
    }
    let mut shuffled = words.to_vec();
    shuffled.shuffle(&mut seed::rng(seed));
    Ok(shuffled.into_iter().zip(zipf_weights(words.len(), s)).collect())
}

/// How nouns are split into experiment groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionScheme {
    /// Feminine and masculine nouns × lm context {G, A} × probe_train {G, U}.
    Exp1,
    /// Fem, Masc and three epicene groups weighted 0.35/0.35/0.1/0.1/0.1.
    Exp2,
}

pub const EXP1_GROUPS: [&str; 8] = ["FemGG", "FemGU", "FemAG", "FemAU", "MascGG", "MascGU", "MascAG", "MascAU"];
pub const EXP2_GROUPS: [&str; 5] = ["Fem", "Masc", "25", "50", "75"];
const EXP2_WEIGHTS: [f64; 5] = [0.35, 0.35, 0.1, 0.1, 0.1];

/// Largest-remainder apportionment of `total` by `weights`.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|x| (x + 1e-9).floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - sizes[a] as f64;
        let rb = exact[b] - sizes[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut rest = total - sizes.iter().sum::<usize>();
    for i in order {
        if rest == 0 {
            break;
        }
        sizes[i] += 1;
        rest -= 1;
    }
    sizes
}

/// Selects `total_nouns` nouns and slices them into the scheme's groups.
/// Each gender pool is shuffled with a seed derived from `seed`, then cut
/// into contiguous groups.
pub fn partition_nouns(
    lexicon: &Lexicon,
    scheme: PartitionScheme,
    total_nouns: usize,
    seed: u64,
) -> Result<BTreeMap<String, Vec<String>>, LexiconError> {
    let mut out = BTreeMap::new();
    let mut take = |gender: Gender, sizes: &[(&str, usize)]| -> Result<(), LexiconError> {
        let needed = sizes.iter().map(|(_, n)| n).sum();
        let pool = lexicon.choose(Pos::Noun, gender, needed, seed::derive_named(seed, gender.as_str()))?;
        let mut rest = pool.as_slice();
        for &(name, n) in sizes {
            let (head, tail) = rest.split_at(n);
            out.insert(name.to_string(), head.to_vec());
            rest = tail;
        }
        Ok(())
    };
    match scheme {
        PartitionScheme::Exp1 => {
            if total_nouns == 0 || !total_nouns.is_multiple_of(8) {
                return Err(LexiconError::InvalidPartitionSize(total_nouns));
            }
            let g = total_nouns / 8;
            take(Gender::Feminine, &[("FemGG", g), ("FemGU", g), ("FemAG", g), ("FemAU", g)])?;
            take(Gender::Masculine, &[("MascGG", g), ("MascGU", g), ("MascAG", g), ("MascAU", g)])?;
        }
        PartitionScheme::Exp2 => {
            let sizes = apportion(total_nouns, &EXP2_WEIGHTS);
            if sizes.contains(&0) {
                return Err(LexiconError::InvalidPartitionSize(total_nouns));
            }
            take(Gender::Feminine, &[("Fem", sizes[0])])?;
            take(Gender::Masculine, &[("Masc", sizes[1])])?;
            take(Gender::Epicene, &[("25", sizes[2]), ("50", sizes[3]), ("75", sizes[4])])?;
        }
    }
    Ok(out)
}
