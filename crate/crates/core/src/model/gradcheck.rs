//! Finite-difference verification of the analytic gradients, in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::transformer::{
    attention, attention_backward, cross_entropy, layer_norm, layer_norm_backward, Batch, Transformer,
    TransformerConfig,
};
use super::ModelError;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so that components whose true
/// gradient is (numerically) zero are judged by absolute error.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Largest relative error per named tensor or component.
    pub per_tensor: Vec<(String, f64)>,
    pub components: usize,
}

/// A random batch of `sequences` sentences over token ids `3..vocab`.
pub fn random_batch(vocab: usize, sequences: usize, max_len: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs: Vec<Vec<u32>> = (0..sequences)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            (0..len).map(|_| rng.random_range(3..vocab as u32)).collect()
        })
        .collect();
    Batch::new(&seqs)
}

fn loss(model: &Transformer<f64>, batch: &Batch) -> f64 {
    let fwd = model.forward::<ChaCha8Rng>(batch, None).expect("forward");
    cross_entropy(&fwd.logits, &batch.targets, model.vocab_size(), 1.0).0
}

/// Analytic gradient of the mean cross-entropy, scaled by `scale`.
pub fn analytic_gradient(model: &Transformer<f64>, batch: &Batch, scale: f64) -> Vec<f64> {
    let fwd = model.forward::<ChaCha8Rng>(batch, None).expect("forward");
    let (_, dlogits) = cross_entropy(&fwd.logits, &batch.targets, model.vocab_size(), scale);
    model.backward(batch, &fwd, &dlogits)
}

/// Compares the analytic gradient of a tiny model's loss on a random batch
/// against central differences over every parameter. Dropout is disabled.
pub fn gradient_check(cfg: &TransformerConfig, vocab: usize, seed: u64) -> Result<GradCheckReport, ModelError> {
    let cfg = TransformerConfig { dropout: 0.0, ..*cfg };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model: Transformer<f64> = Transformer::init(cfg, vocab, &mut rng)?;
    // Non-trivial layer-norm parameters and biases exercise every path.
    for l in model.layout.layers.clone() {
        for r in [l.ln1_g, l.ln1_b, l.ln2_g, l.ln2_b, l.in_b, l.out_b] {
            for v in &mut model.params[r] {
                *v += rng.random_range(-0.5..0.5);
            }
        }
    }
    let batch = random_batch(vocab, 3, cfg.max_sequence_length.min(6) - 1, seed ^ 0x5eed);
    let grad = analytic_gradient(&model, &batch, 1.0);

    let mut per_tensor = Vec::new();
    let mut max = 0.0f64;
    for (name, _, range) in model.layout.tensors.clone() {
        let mut worst = 0.0f64;
        for i in range {
            let orig = model.params[i];
            model.params[i] = orig + STEP;
            let up = loss(&model, &batch);
            model.params[i] = orig - STEP;
            let down = loss(&model, &batch);
            model.params[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(grad[i], numeric));
        }
        max = max.max(worst);
        per_tensor.push((name, worst));
    }
    Ok(GradCheckReport { max_relative_error: max, per_tensor, components: model.params.len() })
}

fn check_component(
    name: &str,
    inputs: &mut [Vec<f64>],
    f: &dyn Fn(&[Vec<f64>]) -> f64,
    analytic: &[Vec<f64>],
) -> (String, f64) {
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let orig = inputs[k][i];
            inputs[k][i] = orig + STEP;
            let up = f(inputs);
            inputs[k][i] = orig - STEP;
            let down = f(inputs);
            inputs[k][i] = orig;
            worst = worst.max(relative_error(analytic[k][i], (up - down) / (2.0 * STEP)));
        }
    }
    (name.to_string(), worst)
}

/// Gradient checks of the layer types in isolation: layer norm, causal
/// attention, ReLU feed-forward and the softmax cross-entropy head. Each
/// component is reduced to a scalar by a fixed random projection.
pub fn component_checks(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_vec = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let (n, d, heads, ff) = (7, 6, 2, 5);
    let seqs = vec![(0usize, 3usize), (3, 4)];
    let mut out = Vec::new();

    // Layer norm.
    let r = rand_vec(n * d);
    let mut inputs = vec![rand_vec(n * d), rand_vec(d), rand_vec(d)];
    let (_, xhat, rstd) = layer_norm(&inputs[0], &inputs[1], &inputs[2]);
    let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
    let dx = layer_norm_backward(&r, &xhat, &rstd, &inputs[1], &mut dg, &mut db);
    let f = |v: &[Vec<f64>]| layer_norm(&v[0], &v[1], &v[2]).0.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
    out.push(check_component("layer_norm", &mut inputs, &f, &[dx, dg, db]));

    // Causal attention.
    let r = rand_vec(n * d);
    let mut inputs = vec![rand_vec(n * 3 * d)];
    let (_, probs) = attention(&inputs[0], &seqs, d, heads, &None);
    let dqkv = attention_backward(&r, &inputs[0], &probs, &seqs, d, heads, &None);
    let f = |v: &[Vec<f64>]| attention(&v[0], &seqs, d, heads, &None).0.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
    out.push(check_component("attention", &mut inputs, &f, &[dqkv]));

    // Feed-forward: relu(x W1 + b1) W2 + b2.
    let r = rand_vec(n * d);
    let mut inputs = vec![rand_vec(n * d), rand_vec(d * ff), rand_vec(ff), rand_vec(ff * d), rand_vec(d)];
    let ffn = |v: &[Vec<f64>]| -> (Vec<f64>, Vec<f64>) {
        let mut z = vec![0.0; n * ff];
        super::tensor::matmul(n, d, ff, &v[0], false, &v[1], false, 0.0, &mut z);
        super::tensor::add_bias(&mut z, &v[2]);
        let h: Vec<f64> = z.iter().map(|&x| x.max(0.0)).collect();
        let mut y = vec![0.0; n * d];
        super::tensor::matmul(n, ff, d, &h, false, &v[3], false, 0.0, &mut y);
        super::tensor::add_bias(&mut y, &v[4]);
        (z, y)
    };
    let (z, _) = ffn(&inputs);
    let h: Vec<f64> = z.iter().map(|&x| x.max(0.0)).collect();
    let mut dw2 = vec![0.0; ff * d];
    super::tensor::matmul(ff, n, d, &h, true, &r, false, 0.0, &mut dw2);
    let mut db2 = vec![0.0; d];
    super::tensor::sum_rows_into(&r, &mut db2);
    let mut dh = vec![0.0; n * ff];
    super::tensor::matmul(n, d, ff, &r, false, &inputs[3], true, 0.0, &mut dh);
    for (g, &zz) in dh.iter_mut().zip(&z) {
        if zz <= 0.0 {
            *g = 0.0;
        }
    }
    let mut dw1 = vec![0.0; d * ff];
    super::tensor::matmul(d, n, ff, &inputs[0], true, &dh, false, 0.0, &mut dw1);
    let mut db1 = vec![0.0; ff];
    super::tensor::sum_rows_into(&dh, &mut db1);
    let mut dx = vec![0.0; n * d];
    super::tensor::matmul(n, ff, d, &dh, false, &inputs[1], true, 0.0, &mut dx);
    let f = |v: &[Vec<f64>]| ffn(v).1.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
    out.push(check_component("feed_forward", &mut inputs, &f, &[dx, dw1, db1, dw2, db2]));

    // Softmax cross-entropy head.
    let v = 5;
    let targets: Vec<u32> = (0..n as u32).map(|i| i % v as u32).collect();
    let mut inputs = vec![rand_vec(n * v)];
    let (_, dlogits) = cross_entropy(&inputs[0], &targets, v, 1.0);
    let f = |x: &[Vec<f64>]| cross_entropy(&x[0], &targets, v, 1.0).0;
    out.push(check_component("cross_entropy", &mut inputs, &f, &[dlogits]));
    out
}
