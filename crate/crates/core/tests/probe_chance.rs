//! A probe over an untrained language model has nothing to read gender
//! from on unseen nouns in ambiguous contexts, so it must sit at chance.

use genderlab::corpus::{build_scenario, generate_dataset, ExperimentId, ScenarioSpec, Sizes};
use genderlab::lexicon::Lexicon;
use genderlab::model::{Checkpoint, Encoder, TrainConfig, Transformer, TransformerConfig, Vocab};
use genderlab::probe::{eval_probe, extract_features, train_probe, FeatureSet, ProbeTrainConfig};
use genderlab::seed;

fn untrained(vocab: Vocab, seed: u64) -> Checkpoint {
    let config = TransformerConfig::default();
    let model: Transformer<f32> = Transformer::init(config, vocab.len(), &mut seed::rng(seed)).unwrap();
    Checkpoint { config, train_config: TrainConfig::default(), vocab, params: model.params, log: vec![], best_epoch: 0 }
}

#[test]
fn untrained_model_probe_is_at_chance_on_ambiguous_contexts() {
    let lexicon = Lexicon::bundled();
    let sizes = Sizes { lm_train: 5_000, lm_dev: 100, probe_train: 1_000, probe_test_per_group: 250 };
    let mut accuracies = Vec::new();
    for i in 0..20 {
        let s = seed::derive(77, i);
        let spec = ScenarioSpec::new(ExperimentId::Exp1, s).with_sizes(sizes);
        let bundle = generate_dataset(&build_scenario(&spec, &lexicon).unwrap()).unwrap();
        let ckpt = untrained(Vocab::build(&bundle.lm_train.sentences).unwrap(), s);
        let encoder = Encoder::new(&ckpt);
        let train = extract_features(&encoder, &bundle.probe_train).unwrap().labeled();
        let probe = train_probe(&train, &ProbeTrainConfig { seed: s, ..Default::default() }).unwrap();
        let tests: Vec<FeatureSet> = bundle
            .probe_tests
            .iter()
            .filter(|(name, _)| name.ends_with("_ambiguous"))
            .map(|(_, d)| extract_features(&encoder, d).unwrap())
            .collect();
        let pooled = FeatureSet::concat(&tests.iter().collect::<Vec<_>>()).unwrap();
        let m = eval_probe(&probe, &pooled).unwrap();
        accuracies.push(m.overall.accuracy.unwrap() * 100.0);
    }
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    assert!((46.0..=54.0).contains(&mean), "mean accuracy {mean:.2} over {accuracies:?}");
}
