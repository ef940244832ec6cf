use std::collections::{BTreeMap, HashMap, HashSet};

use super::{Context, CorpusError, Dataset, DatasetBundle, GoldGender, NounAnnotation, Scenario};
use crate::grammar::{Derivation, Pcfg};
use crate::lexicon::Gender;
use crate::seed;

/// Lexical category lookup used to annotate derivations.
struct Annotator<'a> {
    nouns: HashMap<&'a str, (&'a str, Gender)>,
    determiners: HashMap<&'a str, Context>,
}

impl<'a> Annotator<'a> {
    fn new(scenario: &'a Scenario) -> Self {
        Self {
            nouns: scenario.nouns.iter().map(|n| (n.name.as_str(), (n.group.as_str(), n.gender))).collect(),
            determiners: scenario.determiners.iter().map(|(k, &v)| (k.as_str(), v)).collect(),
        }
    }
}

/// Annotates every noun leaf of `derivation`. The group is the noun's
/// lexical category; the context comes from the determiner category found
/// among the children of the nearest ancestor that has one. A noun with no
/// determiner above it is treated as ambiguous.
pub fn annotate(
    pcfg: &Pcfg,
    derivation: &Derivation,
    sentence_index: usize,
    scenario: &Scenario,
) -> Vec<NounAnnotation> {
    annotate_with(pcfg, derivation, sentence_index, &Annotator::new(scenario))
}

fn annotate_with(pcfg: &Pcfg, d: &Derivation, sentence_index: usize, a: &Annotator<'_>) -> Vec<NounAnnotation> {
    let mut out = Vec::new();
    for (token_index, &leaf) in d.leaves.iter().enumerate() {
        let Some(parent) = d.node(leaf).parent else {
            continue;
        };
        let Some(&(group, gender)) = a.nouns.get(pcfg.name(d.node(parent).symbol)) else {
            continue;
        };
        let context = d
            .ancestors(parent)
            .find_map(|anc| d.children(anc).find_map(|c| a.determiners.get(pcfg.name(d.node(c).symbol)).copied()))
            .unwrap_or(Context::Ambiguous);
        let gold_gender = match (gender, context) {
            (Gender::Feminine, _) => GoldGender::Feminine,
            (Gender::Masculine, _) => GoldGender::Masculine,
            (_, Context::GenderedFeminine) => GoldGender::Feminine,
            (_, Context::GenderedMasculine) => GoldGender::Masculine,
            _ => GoldGender::None,
        };
        out.push(NounAnnotation {
            sentence_index,
            token_index,
            surface: pcfg.name(d.node(leaf).symbol).to_string(),
            group: group.to_string(),
            context,
            gold_gender,
        });
    }
    out
}

/// Samples `count` annotated sentences from `pcfg`.
pub fn sample_dataset(pcfg: &Pcfg, count: usize, seed: u64, scenario: &Scenario) -> Dataset {
    let annotator = Annotator::new(scenario);
    let mut rng = seed::rng(seed);
    let mut data = Dataset::default();
    for i in 0..count {
        let d = pcfg.sample(&mut rng);
        data.sentences.push(d.tokens(pcfg).join(" "));
        data.annotations.extend(annotate_with(pcfg, &d, i, &annotator));
    }
    data
}

/// Seed of one dataset role.
pub(crate) fn role_seed(master: u64, role: &str) -> u64 {
    seed::derive_named(master, role)
}

/// Samples every dataset of the scenario: lm_train first, then all other
/// roles from grammars restricted to lm_train's vocabulary. Vocabulary
/// containment and probe disjointness are checked before returning.
pub fn generate_dataset(scenario: &Scenario) -> Result<DatasetBundle, CorpusError> {
    let spec = &scenario.spec;
    let master = spec.master_seed;
    let lm_train = sample_dataset(&scenario.lm_grammar, spec.sizes.lm_train, role_seed(master, "lm_train"), scenario);
    let vocab: HashSet<&str> = lm_train.vocabulary().into_iter().collect();
    let set = scenario.resolve(&vocab)?;

    let mut grammars = BTreeMap::from([("lm_train".to_string(), scenario.lm_grammar.to_notation())]);
    let mut lm_dev = Dataset::default();
    let mut probe_train = Dataset::default();
    let mut probe_tests = BTreeMap::new();
    for (role, pcfg, count) in &set.roles {
        let data = sample_dataset(pcfg, *count, role_seed(master, role), scenario);
        grammars.insert(role.clone(), pcfg.to_notation());
        match role.as_str() {
            "lm_dev" => lm_dev = data,
            "probe_train" => probe_train = data,
            other => {
                let key = other.strip_prefix("probe_test/").expect("probe_test role");
                probe_tests.insert(key.to_string(), data);
            }
        }
    }
    let bundle = DatasetBundle { spec: spec.clone(), grammars, lm_train, lm_dev, probe_train, probe_tests };
    if let Some((role, word)) = bundle.out_of_vocabulary().into_iter().next() {
        return Err(CorpusError::OutOfVocabulary { role, word });
    }
    if let Some((group, noun)) = bundle.probe_overlap().into_iter().next() {
        return Err(CorpusError::ProbeOverlap { noun, group });
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::corpus::{build_scenario, ExperimentId, ScenarioSpec, Sizes};
    use crate::lexicon::Lexicon;

    fn small(experiment: ExperimentId, seed: u64) -> ScenarioSpec {
        let mut spec = ScenarioSpec::new(experiment, seed);
        spec.sizes = Sizes { lm_train: 2000, lm_dev: 100, probe_train: 200, probe_test_per_group: 100 };
        if experiment == ExperimentId::Exp4 {
            spec.feminine_np_proportion = Some(0.3);
        }
        spec
    }

    #[test]
    fn sentences_end_with_period_and_annotations_point_at_nouns() {
        let lex = Lexicon::bundled();
        let s = build_scenario(&small(ExperimentId::Exp1, 7), &lex).unwrap();
        let b = generate_dataset(&s).unwrap();
        assert_eq!(b.lm_train.len(), 2000);
        assert_eq!(b.probe_tests.len(), 8);
        for d in [&b.lm_train, &b.lm_dev, &b.probe_train].into_iter().chain(b.probe_tests.values()) {
            assert!(d.sentences.iter().all(|s| s.ends_with(" .")));
            for a in &d.annotations {
                let tok: Vec<&str> = d.tokens(a.sentence_index).collect();
                assert_eq!(tok[a.token_index], a.surface);
            }
        }
    }

    #[test]
    fn context_matches_preceding_determiner() {
        // Every NP is DET NOUN, DET ADJ NOUN or DET NOUN ADJ, so the
        // determiner sits one or two tokens before the noun.
        let lex = Lexicon::bundled();
        for exp in [ExperimentId::Exp1, ExperimentId::Exp2] {
            let s = build_scenario(&small(exp, 8), &lex).unwrap();
            let b = generate_dataset(&s).unwrap();
            let det_ctx: HashMap<&str, Context> = s
                .determiners
                .iter()
                .flat_map(|(cat, &ctx)| s.categories[cat].iter().map(move |(w, _)| (w.as_str(), ctx)))
                .collect();
            let mut checked = 0;
            for a in &b.lm_train.annotations {
                let tok: Vec<&str> = b.lm_train.tokens(a.sentence_index).collect();
                let found = [1, 2]
                    .iter()
                    .filter_map(|&k| a.token_index.checked_sub(k))
                    .find_map(|i| det_ctx.get(tok[i]).copied())
                    .expect("determiner before noun");
                assert_eq!(found, a.context, "{:?} in {:?}", a, tok);
                let lexical = s.nouns.iter().find(|n| n.group == a.group).unwrap().gender;
                let expected_gold = match (lexical, found) {
                    (Gender::Feminine, _) => GoldGender::Feminine,
                    (Gender::Masculine, _) => GoldGender::Masculine,
                    (_, Context::GenderedFeminine) => GoldGender::Feminine,
                    (_, Context::GenderedMasculine) => GoldGender::Masculine,
                    _ => GoldGender::None,
                };
                assert_eq!(a.gold_gender, expected_gold);
                checked += 1;
            }
            assert!(checked > 3000);
        }
    }

    #[test]
    fn exp1_contexts_follow_groups() {
        let lex = Lexicon::bundled();
        let s = build_scenario(&small(ExperimentId::Exp1, 9), &lex).unwrap();
        let b = generate_dataset(&s).unwrap();
        for a in &b.lm_train.annotations {
            let lm_context_is_gendered = a.group.ends_with("GG") || a.group.ends_with("GU");
            assert_eq!(a.context.is_gendered(), lm_context_is_gendered);
        }
        let train_groups: BTreeSet<&str> = b.probe_train.annotations.iter().map(|a| a.group.as_str()).collect();
        assert_eq!(train_groups, BTreeSet::from(["FemAG", "FemGG", "MascAG", "MascGG"]));
        for (key, d) in &b.probe_tests {
            let (group, ctx) = key.split_once('_').unwrap();
            assert!(d.annotations.iter().all(|a| a.group == group));
            assert!(d.annotations.iter().all(|a| a.context.is_gendered() == (ctx == "gendered")));
        }
    }

    #[test]
    fn containment_and_disjointness_hold() {
        let lex = Lexicon::bundled();
        for exp in ExperimentId::ALL {
            let s = build_scenario(&small(exp, 10), &lex).unwrap();
            let b = generate_dataset(&s).unwrap();
            assert!(b.out_of_vocabulary().is_empty());
            assert!(b.probe_overlap().is_empty());
        }
    }

    #[test]
    fn deterministic_under_master_seed() {
        let lex = Lexicon::bundled();
        let a = generate_dataset(&build_scenario(&small(ExperimentId::Exp2, 11), &lex).unwrap()).unwrap();
        let b = generate_dataset(&build_scenario(&small(ExperimentId::Exp2, 11), &lex).unwrap()).unwrap();
        let c = generate_dataset(&build_scenario(&small(ExperimentId::Exp2, 12), &lex).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.lm_train, c.lm_train);
    }
}
