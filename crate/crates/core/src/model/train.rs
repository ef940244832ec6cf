use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::transformer::{cross_entropy, total_nll, Batch, Transformer, TransformerConfig};
use super::vocab::{Vocab, EOS, SPECIALS};
use super::ModelError;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            warmup_epochs: 1,
            learning_rate: 5e-4,
            batch_size: 64,
            seed: 0,
            clip_norm: Some(1.0),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs must be smaller than epochs");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive");
        }
        if self.clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_ppl: f64,
}

/// Training log as CSV with header `epoch,train_loss,dev_ppl`.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,dev_ppl\n");
    for e in log {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.dev_ppl));
    }
    out
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let step = (lr / c1) as f32;
        let c2s = c2.sqrt() as f32;
        let eps = cfg.adam_eps as f32;
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (v.sqrt() / c2s + eps);
        }
    }
}

fn encode_corpus<S: AsRef<str>>(vocab: &Vocab, corpus: &[S], role: &str) -> Result<Vec<Vec<u32>>, ModelError> {
    corpus
        .iter()
        .map(|s| {
            vocab.encode(s.as_ref()).map_err(|e| match e {
                ModelError::OutOfVocabulary(w) => ModelError::OutOfVocabulary(format!("{w} (in {role})")),
                other => other,
            })
        })
        .collect()
}

/// Mean per-token cross-entropy and perplexity of `model` over encoded
/// sentences, without dropout.
pub fn evaluate(model: &Transformer<f32>, sentences: &[Vec<u32>], batch_size: usize) -> Result<f64, ModelError> {
    let mut nll = 0.0;
    let mut count = 0usize;
    for chunk in sentences.chunks(batch_size.max(1)) {
        let batch = Batch::new(chunk);
        let fwd = model.forward::<rand_chacha::ChaCha8Rng>(&batch, None)?;
        nll += total_nll(&fwd.logits, &batch.targets, model.vocab_size());
        count += batch.targets.len();
    }
    if count == 0 {
        return Err(ModelError::EmptyCorpus);
    }
    Ok((nll / count as f64).exp())
}

/// Trains a language model on `train`, selecting the epoch with the lowest
/// perplexity on `dev`. The returned checkpoint holds the parameters of
/// that epoch.
pub fn train_lm<S: AsRef<str>>(
    train: &[S],
    dev: &[S],
    tcfg: &TransformerConfig,
    trcfg: &TrainConfig,
) -> Result<Checkpoint, ModelError> {
    tcfg.validate()?;
    trcfg.validate()?;
    let vocab = Vocab::build(train.iter().map(|s| s.as_ref()))?;
    let train_ids = encode_corpus(&vocab, train, "lm_train")?;
    let dev_ids = encode_corpus(&vocab, dev, "lm_dev")?;
    if dev_ids.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }

    let mut init_rng = seed::rng(seed::derive_named(trcfg.seed, "init"));
    let mut model: Transformer<f32> = Transformer::init(*tcfg, vocab.len(), &mut init_rng)?;
    let mut dropout_rng = seed::rng(seed::derive_named(trcfg.seed, "dropout"));
    let mut adam = Adam::new(model.params.len());

    let steps_per_epoch = train_ids.len().div_ceil(trcfg.batch_size);
    let warmup_steps = (steps_per_epoch * trcfg.warmup_epochs) as f64;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train_ids.len()).collect();
    let mut log = Vec::with_capacity(trcfg.epochs);
    let mut best: Option<(usize, f64, Vec<f32>)> = None;

    for epoch in 1..=trcfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut seed::rng(seed::derive(seed::derive_named(trcfg.seed, "shuffle"), epoch as u64)));
        let mut loss_sum = 0.0;
        let mut tokens = 0usize;
        for (b, idx) in order.chunks(trcfg.batch_size).enumerate() {
            let seqs: Vec<&[u32]> = idx.iter().map(|&i| train_ids[i].as_slice()).collect();
            let batch = Batch::new(&seqs);
            let fwd = model.forward(&batch, Some(&mut dropout_rng))?;
            let (loss, dlogits) = cross_entropy(&fwd.logits, &batch.targets, model.vocab_size(), 1.0f32);
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch, batch: b, loss });
            }
            let mut grad = model.backward(&batch, &fwd, &dlogits);
            if let Some(max) = trcfg.clip_norm {
                let norm = grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
                if norm > max {
                    let s = (max / (norm + 1e-6)) as f32;
                    grad.iter_mut().for_each(|g| *g *= s);
                }
            }
            step += 1;
            let lr = if warmup_steps > 0.0 {
                trcfg.learning_rate * (step as f64 / warmup_steps).min(1.0)
            } else {
                trcfg.learning_rate
            };
            adam.step(&mut model.params, &grad, lr, trcfg);
            loss_sum += loss * batch.targets.len() as f64;
            tokens += batch.targets.len();
        }
        let train_loss = loss_sum / tokens as f64;
        let dev_ppl = evaluate(&model, &dev_ids, 256)?;
        if !dev_ppl.is_finite() {
            return Err(ModelError::NonFiniteLoss { epoch, batch: usize::MAX, loss: dev_ppl });
        }
        log::info!(
            "epoch {epoch}/{}: train loss {train_loss:.4}, dev ppl {dev_ppl:.4} ({:.1}s)",
            trcfg.epochs,
            started.elapsed().as_secs_f64()
        );
        log.push(EpochLog { epoch, train_loss, dev_ppl });
        if best.as_ref().is_none_or(|b| dev_ppl < b.1) {
            best = Some((epoch, dev_ppl, model.params.clone()));
        }
    }
    let (best_epoch, _, params) = best.expect("at least one epoch");
    Ok(Checkpoint { config: *tcfg, train_config: *trcfg, vocab, params, log, best_epoch })
}

/// Perplexity on `eval` of an add-one smoothed unigram model estimated on
/// `train`, over the same targets the language model predicts (every word
/// plus the end of sentence).
pub fn unigram_perplexity<S: AsRef<str>>(train: &[S], eval: &[S]) -> Result<f64, ModelError> {
    let mut counts: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    let mut total = 0usize;
    for s in train {
        for w in s.as_ref().split_whitespace().chain([SPECIALS[EOS as usize]]) {
            *counts.entry(w).or_default() += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(ModelError::EmptyCorpus);
    }
    let denom = (total + counts.len()) as f64;
    let mut nll = 0.0;
    let mut n = 0usize;
    for s in eval {
        for w in s.as_ref().split_whitespace().chain([SPECIALS[EOS as usize]]) {
            let c = counts.get(w).copied().unwrap_or(0);
            nll -= ((c + 1) as f64 / denom).ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(ModelError::EmptyCorpus);
    }
    Ok((nll / n as f64).exp())
}

impl Checkpoint {
    pub fn model(&self) -> Transformer<f32> {
        Transformer::from_params(self.config, self.vocab.len(), self.params.clone())
    }
}

/// `exp` of the mean token-level cross-entropy over `BOS w1 .. wn EOS`
/// predictions, dropout disabled.
pub fn perplexity<S: AsRef<str>>(ckpt: &Checkpoint, corpus: &[S]) -> Result<f64, ModelError> {
    let ids = encode_corpus(&ckpt.vocab, corpus, "corpus")?;
    evaluate(&ckpt.model(), &ids, 256)
}

/// Final-layer vectors of a sentence: index 0 is BOS, index `i + 1` is the
/// state after reading token `i`.
pub fn encode(ckpt: &Checkpoint, sentence: &[&str]) -> Result<Vec<Vec<f32>>, ModelError> {
    Encoder::new(ckpt).encode(sentence)
}

/// Reusable inference handle for many sentences.
pub struct Encoder<'a> {
    pub vocab: &'a Vocab,
    model: Transformer<f32>,
}

impl<'a> Encoder<'a> {
    pub fn new(ckpt: &'a Checkpoint) -> Self {
        Self { vocab: &ckpt.vocab, model: ckpt.model() }
    }

    pub fn d_model(&self) -> usize {
        self.model.cfg.d_model
    }

    pub fn encode(&self, sentence: &[&str]) -> Result<Vec<Vec<f32>>, ModelError> {
        let ids = self.vocab.encode(&sentence.join(" "))?;
        let d = self.d_model();
        let hidden = self.model.hidden_states(&Batch::new(&[ids]))?;
        Ok(hidden.chunks(d).map(<[f32]>::to_vec).collect())
    }

    /// Hidden states of many sentences at once; one `(len + 1) × d` block
    /// per sentence.
    pub fn encode_many<S: AsRef<str>>(&self, sentences: &[S], batch_size: usize) -> Result<Vec<Vec<f32>>, ModelError> {
        let ids = encode_corpus(self.vocab, sentences, "corpus")?;
        let d = self.d_model();
        let mut out = Vec::with_capacity(ids.len());
        for chunk in ids.chunks(batch_size.max(1)) {
            let batch = Batch::new(chunk);
            let hidden = self.model.hidden_states(&batch)?;
            for &(o, len) in &batch.seqs {
                out.push(hidden[o * d..(o + len) * d].to_vec());
            }
        }
        Ok(out)
    }
}
