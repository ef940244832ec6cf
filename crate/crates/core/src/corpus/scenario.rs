use std::collections::{BTreeMap, BTreeSet, HashSet};

use super::templates;
use super::{Context, CorpusError, ExperimentId, ScenarioSpec, TestContext, TestKey};
use crate::grammar::{parse_grammar, validate, Pcfg};
use crate::lexicon::{assign_zipf, partition_nouns, Gender, Lexicon, PartitionScheme, Pos};
use crate::seed;

/// A lexical noun category of the grammars, e.g. `NOUNFemAU`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NounCategory {
    pub name: String,
    /// Category name without the `NOUN` prefix, e.g. `FemAU`.
    pub group: String,
    pub gender: Gender,
}

#[derive(Debug, Clone)]
struct RoleTemplate {
    role: String,
    template: Pcfg,
    /// Category subsets allowed in this role; other categories use all
    /// their words.
    restrict: BTreeMap<String, BTreeSet<String>>,
    count: usize,
}

/// Resolved grammars for every dataset role except lm_train, in sampling
/// order, with the number of sentences to draw.
#[derive(Debug, Clone)]
pub struct GrammarSet {
    pub roles: Vec<(String, Pcfg, usize)>,
}

/// A fully specified experiment instance: word distributions per lexical
/// category, the lm grammar, and unlexicalised templates for the other
/// dataset roles.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    /// Zipf-weighted words per lexical category, most probable first.
    pub categories: BTreeMap<String, Vec<(String, f64)>>,
    pub nouns: Vec<NounCategory>,
    pub determiners: BTreeMap<String, Context>,
    pub lm_grammar: Pcfg,
    pub test_keys: Vec<TestKey>,
    /// Words of each noun category reserved for probe_train (exp2, exp3).
    pub probe_train_words: BTreeMap<String, BTreeSet<String>>,
    lm_template: Pcfg,
    roles: Vec<RoleTemplate>,
}

const EXP1_GROUPS: [&str; 8] = ["FemGG", "FemGU", "FemAG", "FemAU", "MascGG", "MascGU", "MascAG", "MascAU"];
const EXP2_GROUPS: [&str; 5] = ["Fem", "Masc", "25", "50", "75"];

fn noun_gender(group: &str) -> Gender {
    if group.starts_with("Fem") {
        Gender::Feminine
    } else if group.starts_with("Masc") {
        Gender::Masculine
    } else {
        Gender::Epicene
    }
}

fn check_spec(spec: &ScenarioSpec) -> Result<(), CorpusError> {
    match (spec.experiment, spec.feminine_np_proportion) {
        (ExperimentId::Exp4, Some(p)) if !(p > 0.0 && p < 1.0) => return Err(CorpusError::InvalidProportion(p)),
        (ExperimentId::Exp4, None) => {
            return Err(CorpusError::InconsistentSpec("exp4 requires a feminine NP proportion".into()))
        }
        (ExperimentId::Exp4, Some(_)) | (_, None) => {}
        (e, Some(_)) => {
            return Err(CorpusError::InconsistentSpec(format!("{e} does not take a feminine NP proportion")))
        }
    }
    if spec.include_seen_groups && spec.experiment != ExperimentId::Exp1 {
        return Err(CorpusError::InconsistentSpec("seen-group diagnostics exist for exp1 only".into()));
    }
    Ok(())
}

fn test_keys(spec: &ScenarioSpec) -> Vec<TestKey> {
    let key = |group, context| TestKey { group, context };
    match spec.experiment {
        ExperimentId::Exp1 => {
            let mut groups = vec!["FemGU", "FemAU", "MascGU", "MascAU"];
            if spec.include_seen_groups {
                groups.extend(["FemGG", "FemAG", "MascGG", "MascAG"]);
            }
            groups.into_iter().flat_map(|g| [key(g, TestContext::Gendered), key(g, TestContext::Ambiguous)]).collect()
        }
        ExperimentId::Exp2 => EXP2_GROUPS
            .into_iter()
            .flat_map(|g| [TestContext::Feminine, TestContext::Masculine, TestContext::Ambiguous].map(|c| key(g, c)))
            .collect(),
        ExperimentId::Exp3 => vec![
            key("Fem", TestContext::Ambiguous),
            key("Masc", TestContext::Ambiguous),
            key("Fem", TestContext::Feminine),
            key("Masc", TestContext::Masculine),
        ],
        ExperimentId::Exp4 => vec![key("FemAU", TestContext::Ambiguous), key("MascAU", TestContext::Ambiguous)],
    }
}

fn test_template(experiment: ExperimentId, key: &TestKey) -> String {
    match experiment {
        ExperimentId::Exp1 | ExperimentId::Exp4 => {
            let feminine = key.group.starts_with("Fem");
            let xy = key.group.trim_start_matches("Fem").trim_start_matches("Masc");
            templates::exp1_probe_test(xy, feminine, key.context == TestContext::Gendered)
        }
        ExperimentId::Exp2 | ExperimentId::Exp3 => {
            let x = match key.context {
                TestContext::Feminine => "Fem",
                TestContext::Masculine => "Masc",
                _ => "Amb",
            };
            templates::exp2_probe_test(x, key.group)
        }
    }
}

/// Draws the scenario's words from `lexicon`, assigns Zipf weights per
/// category and resolves the lm grammar.
pub fn build_scenario(spec: &ScenarioSpec, lexicon: &Lexicon) -> Result<Scenario, CorpusError> {
    check_spec(spec)?;
    let lex_seed = seed::derive_named(spec.master_seed, "lexicon");
    let sizes = spec.lexical;

    let mut words: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (cat, g) in [("Fem", Gender::Feminine), ("Masc", Gender::Masculine), ("Epic", Gender::Epicene)] {
        let det = format!("DET{cat}");
        let adj = format!("ADJ{cat}");
        let det_words = lexicon.choose(Pos::Determiner, g, sizes.determiners, seed::derive_named(lex_seed, &det))?;
        let adj_words = lexicon.choose(Pos::Adjective, g, sizes.adjectives, seed::derive_named(lex_seed, &adj))?;
        words.insert(det, det_words);
        words.insert(adj, adj_words);
    }
    words.insert(
        "VERB".into(),
        lexicon.choose(Pos::Verb, Gender::None, sizes.verbs, seed::derive_named(lex_seed, "VERB"))?,
    );
    words.insert(
        "PREP".into(),
        lexicon.choose(Pos::Preposition, Gender::None, sizes.prepositions, seed::derive_named(lex_seed, "PREP"))?,
    );

    let (scheme, groups): (_, &[&str]) = match spec.experiment {
        ExperimentId::Exp1 | ExperimentId::Exp4 => (PartitionScheme::Exp1, &EXP1_GROUPS),
        ExperimentId::Exp2 | ExperimentId::Exp3 => (PartitionScheme::Exp2, &EXP2_GROUPS),
    };
    let partition = partition_nouns(lexicon, scheme, sizes.nouns, seed::derive_named(lex_seed, "nouns"))?;
    let mut nouns = Vec::new();
    for &g in groups {
        let name = format!("NOUN{g}");
        words.insert(name.clone(), partition[g].clone());
        nouns.push(NounCategory { name, group: g.to_string(), gender: noun_gender(g) });
    }

    let mut categories = BTreeMap::new();
    for (cat, list) in words {
        let weighted =
            assign_zipf(&list, spec.zipf_exponent, seed::derive_named(spec.master_seed, &format!("zipf/{cat}")))?;
        categories.insert(cat, weighted);
    }

    let determiners = BTreeMap::from([
        ("DETFem".to_string(), Context::GenderedFeminine),
        ("DETMasc".to_string(), Context::GenderedMasculine),
        ("DETEpic".to_string(), Context::Ambiguous),
    ]);

    let (lm_text, probe_text) = match spec.experiment {
        ExperimentId::Exp1 | ExperimentId::Exp4 => {
            (templates::EXP1_LM_TRAIN.to_string(), templates::EXP1_PROBE_TRAIN.to_string())
        }
        ExperimentId::Exp2 | ExperimentId::Exp3 => {
            (templates::EXP2_LM_TRAIN.to_string(), templates::exp2_probe_train())
        }
    };
    let mut lm_template = parse_grammar(&lm_text)?;
    if let Some(p) = spec.feminine_np_proportion {
        lm_template = lm_template.with_probabilities("NPGend", &[p, 1.0 - p])?;
        lm_template = lm_template.with_probabilities("NPAmb", &[p, 1.0 - p])?;
    }

    // Exp2-style scenarios reuse the same categories for probing, so each
    // noun category is split in two halves by alternating Zipf rank: one
    // for probe_train, one for probe_test.
    let mut probe_train_words = BTreeMap::new();
    let mut probe_test_words = BTreeMap::new();
    if scheme == PartitionScheme::Exp2 {
        for n in &nouns {
            let (mut train, mut test) = (BTreeSet::new(), BTreeSet::new());
            for (rank, (w, _)) in categories[&n.name].iter().enumerate() {
                if rank % 2 == 0 { &mut train } else { &mut test }.insert(w.clone());
            }
            probe_train_words.insert(n.name.clone(), train);
            probe_test_words.insert(n.name.clone(), test);
        }
    }

    let sz = spec.sizes;
    let mut roles = vec![
        RoleTemplate {
            role: "lm_dev".into(),
            template: lm_template.clone(),
            restrict: BTreeMap::new(),
            count: sz.lm_dev,
        },
        RoleTemplate {
            role: "probe_train".into(),
            template: parse_grammar(&probe_text)?,
            restrict: probe_train_words.clone(),
            count: sz.probe_train,
        },
    ];
    let keys = test_keys(spec);
    for key in &keys {
        roles.push(RoleTemplate {
            role: format!("probe_test/{key}"),
            template: parse_grammar(&test_template(spec.experiment, key))?,
            restrict: probe_test_words.clone(),
            count: sz.probe_test_per_group,
        });
    }

    let lm_grammar = lexicalise("lm_train", &lm_template, &categories, &BTreeMap::new(), None)?;
    Ok(Scenario {
        spec: spec.clone(),
        categories,
        nouns,
        determiners,
        lm_grammar,
        test_keys: keys,
        probe_train_words,
        lm_template,
        roles,
    })
}

/// Attaches the words of every placeholder category of `template`, keeping
/// only `restrict`ed subsets and, when given, words in `vocabulary`.
/// Remaining probabilities are renormalised per category.
fn lexicalise(
    role: &str,
    template: &Pcfg,
    categories: &BTreeMap<String, Vec<(String, f64)>>,
    restrict: &BTreeMap<String, BTreeSet<String>>,
    vocabulary: Option<&HashSet<&str>>,
) -> Result<Pcfg, CorpusError> {
    let mut lexical: Vec<(String, Vec<(String, f64)>)> = Vec::new();
    for placeholder in template.placeholders() {
        let words = categories.get(placeholder).ok_or_else(|| CorpusError::PlaceholderUnbound {
            role: role.to_string(),
            placeholder: placeholder.to_string(),
        })?;
        let kept: Vec<(String, f64)> = words
            .iter()
            .filter(|(w, _)| restrict.get(placeholder).is_none_or(|s| s.contains(w)))
            .filter(|(w, _)| vocabulary.is_none_or(|v| v.contains(w.as_str())))
            .cloned()
            .collect();
        let total: f64 = kept.iter().map(|(_, p)| p).sum();
        if kept.is_empty() {
            return Err(CorpusError::EmptyCategory { role: role.to_string(), category: placeholder.to_string() });
        }
        if kept.len() < words.len() {
            log::debug!("{role}: {placeholder} keeps {}/{} words", kept.len(), words.len());
        }
        lexical.push((placeholder.to_string(), kept.into_iter().map(|(w, p)| (w, p / total)).collect()));
    }
    let pcfg = template.attach_lexical(lexical.iter().map(|(c, w)| (c.as_str(), w.as_slice())))?;
    validate(&pcfg).into_result()?;
    Ok(pcfg)
}

impl Scenario {
    /// Second phase: resolves every non-lm grammar against the words that
    /// occur in the sampled lm_train.
    pub fn resolve(&self, lm_vocabulary: &HashSet<&str>) -> Result<GrammarSet, CorpusError> {
        let mut roles = Vec::with_capacity(self.roles.len());
        for r in &self.roles {
            let pcfg = lexicalise(&r.role, &r.template, &self.categories, &r.restrict, Some(lm_vocabulary))?;
            roles.push((r.role.clone(), pcfg, r.count));
        }
        Ok(GrammarSet { roles })
    }

    /// The lm grammar before lexical rules are attached.
    pub fn lm_template(&self) -> &Pcfg {
        &self.lm_template
    }

    pub fn noun_category(&self, name: &str) -> Option<&NounCategory> {
        self.nouns.iter().find(|n| n.name == name)
    }
}
