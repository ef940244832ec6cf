//! Causal post-norm transformer with hand-written backpropagation.
//!
//! Sequences of a batch are packed back to back without padding; attention
//! runs per sequence, so no position ever attends across a sequence
//! boundary or to a later position.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{add_bias, matmul, sum_rows_into, Real};
use super::vocab::{BOS, EOS};
use super::ModelError;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Longest input sequence (BOS included).
    pub max_sequence_length: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { d_model: 256, layers: 3, heads: 4, d_ff: 1024, dropout: 0.3, max_sequence_length: 256 }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.heads == 0 || self.d_ff == 0 || self.max_sequence_length == 0 {
            return bad("dimensions must be positive");
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be divisible by heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlots {
    pub in_w: Range<usize>,
    pub in_b: Range<usize>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub ff1_w: Range<usize>,
    pub ff1_b: Range<usize>,
    pub ff2_w: Range<usize>,
    pub ff2_b: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
}

/// Position of every named tensor in the flat parameter vector. Weight
/// matrices are stored input-major (`in × out`), so `y = x · W`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub vocab: usize,
    pub embedding: Range<usize>,
    pub layers: Vec<LayerSlots>,
    pub output_w: Range<usize>,
    pub output_b: Range<usize>,
    pub tensors: Vec<(String, Vec<usize>, Range<usize>)>,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &TransformerConfig, vocab: usize) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let mut tensors = Vec::new();
        let mut next = 0;
        let mut slot = |name: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            let r = next..next + len;
            next += len;
            tensors.push((name, shape, r.clone()));
            r
        };
        let embedding = slot("embedding".into(), vec![vocab, d]);
        let mut layers = Vec::new();
        for l in 0..cfg.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerSlots {
                in_w: slot(p("attn.in_w"), vec![d, 3 * d]),
                in_b: slot(p("attn.in_b"), vec![3 * d]),
                out_w: slot(p("attn.out_w"), vec![d, d]),
                out_b: slot(p("attn.out_b"), vec![d]),
                ln1_g: slot(p("ln1.g"), vec![d]),
                ln1_b: slot(p("ln1.b"), vec![d]),
                ff1_w: slot(p("ff1.w"), vec![d, f]),
                ff1_b: slot(p("ff1.b"), vec![f]),
                ff2_w: slot(p("ff2.w"), vec![f, d]),
                ff2_b: slot(p("ff2.b"), vec![d]),
                ln2_g: slot(p("ln2.g"), vec![d]),
                ln2_b: slot(p("ln2.b"), vec![d]),
            });
        }
        let output_w = slot("output.w".into(), vec![d, vocab]);
        let output_b = slot("output.b".into(), vec![vocab]);
        Self { vocab, embedding, layers, output_w, output_b, tensors, total: next }
    }
}

/// A packed batch: inputs `BOS t1 .. tn`, targets `t1 .. tn EOS`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    /// `(offset, length)` of each sequence in `inputs`.
    pub seqs: Vec<(usize, usize)>,
}

impl Batch {
    pub fn new<S: AsRef<[u32]>>(sentences: &[S]) -> Self {
        let mut b = Batch { inputs: Vec::new(), targets: Vec::new(), seqs: Vec::new() };
        for s in sentences {
            let s = s.as_ref();
            b.seqs.push((b.inputs.len(), s.len() + 1));
            b.inputs.push(BOS);
            b.inputs.extend_from_slice(s);
            b.targets.extend_from_slice(s);
            b.targets.push(EOS);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn max_len(&self) -> usize {
        self.seqs.iter().map(|s| s.1).max().unwrap_or(0)
    }
}

/// Sinusoidal position table, `max_len × d`.
pub fn positional_encoding<T: Real>(max_len: usize, d: usize) -> Vec<T> {
    let mut pe = vec![T::zero(); max_len * d];
    for pos in 0..max_len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            pe[pos * d + i] = T::c(angle.sin());
            if i + 1 < d {
                pe[pos * d + i + 1] = T::c(angle.cos());
            }
        }
    }
    pe
}

/// Inverted-dropout multipliers: 0 or 1/(1−p).
fn dropout_mask<T: Real, R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<T> {
    let keep = T::c(1.0 / (1.0 - p));
    // A unit is dropped when a uniform 32-bit draw falls below p · 2^32.
    let threshold = (p * 4_294_967_296.0).round().min(u32::MAX as f64) as u32;
    let mut bits = vec![0u32; n];
    rng.fill(&mut bits[..]);
    bits.into_iter().map(|b| if b < threshold { T::zero() } else { keep }).collect()
}

fn apply_mask<T: Real>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

/// Row-wise layer normalisation. Returns `(y, xhat, rstd)`.
pub(crate) fn layer_norm<T: Real>(x: &[T], g: &[T], b: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = g.len();
    let n = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n];
    let dn = T::c(d as f64);
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rs = T::one() / (var + T::c(LAYER_NORM_EPS)).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * g[j] + b[j];
        }
    }
    (y, xhat, rstd)
}

/// Backward of [`layer_norm`]: returns dx and accumulates dg, db.
pub(crate) fn layer_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    g: &[T],
    dg: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let d = g.len();
    let dn = T::c(d as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for (r, &rs) in rstd.iter().enumerate() {
        let o = r * d;
        let mut sum_dh = T::zero();
        let mut sum_dh_h = T::zero();
        for j in 0..d {
            let dh = dy[o + j] * g[j];
            dg[j] += dy[o + j] * xhat[o + j];
            db[j] += dy[o + j];
            sum_dh += dh;
            sum_dh_h += dh * xhat[o + j];
        }
        for j in 0..d {
            let dh = dy[o + j] * g[j];
            dx[o + j] = rs / dn * (dn * dh - sum_dh - xhat[o + j] * sum_dh_h);
        }
    }
    dx
}

/// Offsets of each sequence's per-head attention blocks.
fn attention_offsets(seqs: &[(usize, usize)], heads: usize) -> (Vec<usize>, usize) {
    let mut offs = Vec::with_capacity(seqs.len());
    let mut total = 0;
    for &(_, len) in seqs {
        offs.push(total);
        total += heads * len * len;
    }
    (offs, total)
}

/// Causal multi-head attention over packed sequences. `qkv` is `N × 3d`
/// (queries, keys, values). Returns `(ctx, probs)` where `probs` holds the
/// pre-dropout attention weights, one `len × len` block per sequence and
/// head.
pub(crate) fn attention<T: Real>(
    qkv: &[T],
    seqs: &[(usize, usize)],
    d: usize,
    heads: usize,
    prob_mask: &Option<Vec<T>>,
) -> (Vec<T>, Vec<T>) {
    let n = qkv.len() / (3 * d);
    let dh = d / heads;
    let scale = T::c(1.0 / (dh as f64).sqrt());
    let (offs, total) = attention_offsets(seqs, heads);
    let mut probs = vec![T::zero(); total];
    let mut ctx = vec![T::zero(); n * d];
    let mut scores = Vec::new();
    for (s, &(o, len)) in seqs.iter().enumerate() {
        for h in 0..heads {
            let base = offs[s] + h * len * len;
            for i in 0..len {
                let q = &qkv[(o + i) * 3 * d + h * dh..][..dh];
                scores.clear();
                let mut max = T::neg_infinity();
                for j in 0..=i {
                    let k = &qkv[(o + j) * 3 * d + d + h * dh..][..dh];
                    let sc = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    max = max.max(sc);
                    scores.push(sc);
                }
                let mut z = T::zero();
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    z += *sc;
                }
                let out = &mut ctx[(o + i) * d + h * dh..][..dh];
                for (j, &e) in scores.iter().enumerate() {
                    let p = e / z;
                    probs[base + i * len + j] = p;
                    let pd = match prob_mask {
                        Some(m) => p * m[base + i * len + j],
                        None => p,
                    };
                    let v = &qkv[(o + j) * 3 * d + 2 * d + h * dh..][..dh];
                    for (c, &vv) in out.iter_mut().zip(v) {
                        *c += pd * vv;
                    }
                }
            }
        }
    }
    (ctx, probs)
}

/// Backward of [`attention`]: gradient with respect to `qkv`.
pub(crate) fn attention_backward<T: Real>(
    dctx: &[T],
    qkv: &[T],
    probs: &[T],
    seqs: &[(usize, usize)],
    d: usize,
    heads: usize,
    prob_mask: &Option<Vec<T>>,
) -> Vec<T> {
    let dh = d / heads;
    let scale = T::c(1.0 / (dh as f64).sqrt());
    let (offs, _) = attention_offsets(seqs, heads);
    let mut dqkv = vec![T::zero(); qkv.len()];
    let mut dp = Vec::new();
    for (s, &(o, len)) in seqs.iter().enumerate() {
        for h in 0..heads {
            let base = offs[s] + h * len * len;
            for i in 0..len {
                let dc = &dctx[(o + i) * d + h * dh..][..dh];
                dp.clear();
                // Gradients through the dropped-out weights into v and p.
                for j in 0..=i {
                    let m = prob_mask.as_ref().map_or(T::one(), |m| m[base + i * len + j]);
                    let p = probs[base + i * len + j];
                    let vo = (o + j) * 3 * d + 2 * d + h * dh;
                    let mut g = T::zero();
                    for k in 0..dh {
                        g += dc[k] * qkv[vo + k];
                        dqkv[vo + k] += p * m * dc[k];
                    }
                    dp.push(g * m);
                }
                let dot: T = (0..=i).map(|j| probs[base + i * len + j] * dp[j]).sum();
                let qo = (o + i) * 3 * d + h * dh;
                for j in 0..=i {
                    let ds = probs[base + i * len + j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let ko = (o + j) * 3 * d + d + h * dh;
                    for k in 0..dh {
                        let (qk, kk) = (qkv[qo + k], qkv[ko + k]);
                        dqkv[qo + k] += ds * kk;
                        dqkv[ko + k] += ds * qk;
                    }
                }
            }
        }
    }
    dqkv
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    x_in: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    prob_mask: Option<Vec<T>>,
    ctx: Vec<T>,
    attn_mask: Option<Vec<T>>,
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    h1: Vec<T>,
    z1: Vec<T>,
    f: Vec<T>,
    ff_hidden_mask: Option<Vec<T>>,
    ff_out_mask: Option<Vec<T>>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
}

/// Activations of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub n: usize,
    emb_mask: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    /// Final-layer hidden states, `N × d`.
    pub hidden: Vec<T>,
    /// Output logits, `N × |V|`.
    pub logits: Vec<T>,
}

impl<T: Real> Forward<T> {
    pub fn layers(&self) -> usize {
        self.layers.len()
    }

    /// Pre-dropout attention weights of `layer`, one row per (sequence,
    /// head, query position), each spanning the sequence's key positions.
    pub fn attention_rows(&self, layer: usize, batch: &Batch, heads: usize) -> Vec<&[T]> {
        let probs = &self.layers[layer].probs;
        let (offs, _) = attention_offsets(&batch.seqs, heads);
        let mut rows = Vec::new();
        for (s, &(_, len)) in batch.seqs.iter().enumerate() {
            for r in 0..heads * len {
                rows.push(&probs[offs[s] + r * len..][..len]);
            }
        }
        rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T> {
    pub cfg: TransformerConfig,
    pub layout: Layout,
    pub params: Vec<T>,
    pe: Vec<T>,
}

impl<T: Real> Transformer<T> {
    /// Uniform(±0.1) embeddings and output weights, Xavier-uniform input
    /// projection, Uniform(±1/√fan_in) linear layers, zero projection
    /// biases, unit layer-norm gains.
    pub fn init<R: Rng + ?Sized>(cfg: TransformerConfig, vocab: usize, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg, vocab);
        let mut params = vec![T::zero(); layout.total];
        let mut fill = |r: &Range<usize>, bound: f64, rng: &mut R| {
            for v in &mut params[r.clone()] {
                *v = T::c(rng.random_range(-bound..bound));
            }
        };
        let (d, f) = (cfg.d_model as f64, cfg.d_ff as f64);
        fill(&layout.embedding, 0.1, rng);
        for l in &layout.layers {
            fill(&l.in_w, (6.0 / (d + 3.0 * d)).sqrt(), rng);
            fill(&l.out_w, 1.0 / d.sqrt(), rng);
            fill(&l.ff1_w, 1.0 / d.sqrt(), rng);
            fill(&l.ff1_b, 1.0 / d.sqrt(), rng);
            fill(&l.ff2_w, 1.0 / f.sqrt(), rng);
            fill(&l.ff2_b, 1.0 / f.sqrt(), rng);
        }
        fill(&layout.output_w, 0.1, rng);
        for l in &layout.layers {
            params[l.ln1_g.clone()].fill(T::one());
            params[l.ln2_g.clone()].fill(T::one());
        }
        Ok(Self::from_params(cfg, vocab, params))
    }

    pub fn from_params(cfg: TransformerConfig, vocab: usize, params: Vec<T>) -> Self {
        let layout = Layout::new(&cfg, vocab);
        assert_eq!(params.len(), layout.total, "parameter count");
        let pe = positional_encoding(cfg.max_sequence_length, cfg.d_model);
        Self { cfg, layout, params, pe }
    }

    pub fn vocab_size(&self) -> usize {
        self.layout.vocab
    }

    fn p(&self, r: &Range<usize>) -> &[T] {
        &self.params[r.clone()]
    }

    /// Runs the network. Dropout is active only when `rng` is given.
    pub fn forward<R: Rng + ?Sized>(&self, batch: &Batch, mut rng: Option<&mut R>) -> Result<Forward<T>, ModelError> {
        let cfg = &self.cfg;
        let (d, ff, heads) = (cfg.d_model, cfg.d_ff, cfg.heads);
        let n = batch.len();
        if batch.max_len() > cfg.max_sequence_length {
            return Err(ModelError::SequenceTooLong { length: batch.max_len(), max: cfg.max_sequence_length });
        }
        let p_drop = cfg.dropout;
        let mut mask = |len: usize| -> Option<Vec<T>> {
            match rng.as_deref_mut() {
                Some(r) if p_drop > 0.0 => Some(dropout_mask(len, p_drop, r)),
                _ => None,
            }
        };

        let emb = self.p(&self.layout.embedding);
        let sqrt_d = T::c((d as f64).sqrt());
        let mut x = vec![T::zero(); n * d];
        for &(o, len) in &batch.seqs {
            for pos in 0..len {
                let tok = batch.inputs[o + pos] as usize;
                if tok >= self.layout.vocab {
                    return Err(ModelError::OutOfVocabulary(format!("id {tok}")));
                }
                let row = &mut x[(o + pos) * d..][..d];
                for j in 0..d {
                    row[j] = emb[tok * d + j] * sqrt_d + self.pe[pos * d + j];
                }
            }
        }
        let emb_mask = mask(n * d);
        apply_mask(&mut x, &emb_mask);

        let mut layers = Vec::with_capacity(cfg.layers);
        for l in &self.layout.layers {
            let mut qkv = vec![T::zero(); n * 3 * d];
            matmul(n, d, 3 * d, &x, false, self.p(&l.in_w), false, T::zero(), &mut qkv);
            add_bias(&mut qkv, self.p(&l.in_b));
            let (_, prob_total) = attention_offsets(&batch.seqs, heads);
            let prob_mask = mask(prob_total);
            let (ctx, probs) = attention(&qkv, &batch.seqs, d, heads, &prob_mask);

            let mut r1 = vec![T::zero(); n * d];
            matmul(n, d, d, &ctx, false, self.p(&l.out_w), false, T::zero(), &mut r1);
            add_bias(&mut r1, self.p(&l.out_b));
            let attn_mask = mask(n * d);
            apply_mask(&mut r1, &attn_mask);
            for (r, &xi) in r1.iter_mut().zip(&x) {
                *r += xi;
            }
            let (h1, xhat1, rstd1) = layer_norm(&r1, self.p(&l.ln1_g), self.p(&l.ln1_b));

            let mut z1 = vec![T::zero(); n * ff];
            matmul(n, d, ff, &h1, false, self.p(&l.ff1_w), false, T::zero(), &mut z1);
            add_bias(&mut z1, self.p(&l.ff1_b));
            let mut f: Vec<T> = z1.iter().map(|&v| v.max(T::zero())).collect();
            let ff_hidden_mask = mask(n * ff);
            apply_mask(&mut f, &ff_hidden_mask);
            let mut r2 = vec![T::zero(); n * d];
            matmul(n, ff, d, &f, false, self.p(&l.ff2_w), false, T::zero(), &mut r2);
            add_bias(&mut r2, self.p(&l.ff2_b));
            let ff_out_mask = mask(n * d);
            apply_mask(&mut r2, &ff_out_mask);
            for (r, &hi) in r2.iter_mut().zip(&h1) {
                *r += hi;
            }
            let (out, xhat2, rstd2) = layer_norm(&r2, self.p(&l.ln2_g), self.p(&l.ln2_b));

            layers.push(LayerCache {
                x_in: std::mem::replace(&mut x, out),
                qkv,
                probs,
                prob_mask,
                ctx,
                attn_mask,
                xhat1,
                rstd1,
                h1,
                z1,
                f,
                ff_hidden_mask,
                ff_out_mask,
                xhat2,
                rstd2,
            });
        }

        let v = self.layout.vocab;
        let mut logits = vec![T::zero(); n * v];
        matmul(n, d, v, &x, false, self.p(&self.layout.output_w), false, T::zero(), &mut logits);
        add_bias(&mut logits, self.p(&self.layout.output_b));
        Ok(Forward { n, emb_mask, layers, hidden: x, logits })
    }

    /// Final-layer hidden states without dropout, `N × d`.
    pub fn hidden_states(&self, batch: &Batch) -> Result<Vec<T>, ModelError> {
        Ok(self.forward::<rand_chacha::ChaCha8Rng>(batch, None)?.hidden)
    }

    /// Backpropagates `dlogits` and returns the gradient of every parameter.
    pub fn backward(&self, batch: &Batch, fwd: &Forward<T>, dlogits: &[T]) -> Vec<T> {
        let cfg = &self.cfg;
        let (d, ff, heads) = (cfg.d_model, cfg.d_ff, cfg.heads);
        let n = fwd.n;
        let v = self.layout.vocab;
        let mut grad = vec![T::zero(); self.layout.total];

        let lay = &self.layout;
        matmul(d, n, v, &fwd.hidden, true, dlogits, false, T::zero(), &mut grad[lay.output_w.clone()]);
        sum_rows_into(dlogits, &mut grad[lay.output_b.clone()]);
        let mut dx = vec![T::zero(); n * d];
        matmul(n, v, d, dlogits, false, self.p(&lay.output_w), true, T::zero(), &mut dx);

        for (l, c) in lay.layers.iter().zip(&fwd.layers).rev() {
            let (g2, b2) = split2(&mut grad, &l.ln2_g, &l.ln2_b);
            let dr2 = layer_norm_backward(&dx, &c.xhat2, &c.rstd2, self.p(&l.ln2_g), g2, b2);
            let mut dh1 = dr2.clone();
            let mut dg = dr2;
            apply_mask(&mut dg, &c.ff_out_mask);
            matmul(ff, n, d, &c.f, true, &dg, false, T::zero(), &mut grad[l.ff2_w.clone()]);
            sum_rows_into(&dg, &mut grad[l.ff2_b.clone()]);
            let mut df = vec![T::zero(); n * ff];
            matmul(n, d, ff, &dg, false, self.p(&l.ff2_w), true, T::zero(), &mut df);
            apply_mask(&mut df, &c.ff_hidden_mask);
            for (g, &z) in df.iter_mut().zip(&c.z1) {
                if z <= T::zero() {
                    *g = T::zero();
                }
            }
            matmul(d, n, ff, &c.h1, true, &df, false, T::zero(), &mut grad[l.ff1_w.clone()]);
            sum_rows_into(&df, &mut grad[l.ff1_b.clone()]);
            matmul(n, ff, d, &df, false, self.p(&l.ff1_w), true, T::one(), &mut dh1);

            let (g1, b1) = split2(&mut grad, &l.ln1_g, &l.ln1_b);
            let dr1 = layer_norm_backward(&dh1, &c.xhat1, &c.rstd1, self.p(&l.ln1_g), g1, b1);
            let mut da = dr1.clone();
            apply_mask(&mut da, &c.attn_mask);
            matmul(d, n, d, &c.ctx, true, &da, false, T::zero(), &mut grad[l.out_w.clone()]);
            sum_rows_into(&da, &mut grad[l.out_b.clone()]);
            let mut dctx = vec![T::zero(); n * d];
            matmul(n, d, d, &da, false, self.p(&l.out_w), true, T::zero(), &mut dctx);
            let dqkv = attention_backward(&dctx, &c.qkv, &c.probs, &batch.seqs, d, heads, &c.prob_mask);
            matmul(d, n, 3 * d, &c.x_in, true, &dqkv, false, T::zero(), &mut grad[l.in_w.clone()]);
            sum_rows_into(&dqkv, &mut grad[l.in_b.clone()]);
            dx = dr1;
            matmul(n, 3 * d, d, &dqkv, false, self.p(&l.in_w), true, T::one(), &mut dx);
        }

        apply_mask(&mut dx, &fwd.emb_mask);
        let sqrt_d = T::c((d as f64).sqrt());
        let demb = &mut grad[lay.embedding.clone()];
        for (i, &tok) in batch.inputs.iter().enumerate() {
            let tok = tok as usize;
            for j in 0..d {
                demb[tok * d + j] += dx[i * d + j] * sqrt_d;
            }
        }
        grad
    }
}

fn split2<'a, T>(v: &'a mut [T], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [T], &'a mut [T]) {
    assert!(a.end <= b.start, "slots out of order");
    let (lo, hi) = v.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

/// Row-wise softmax in place.
pub fn softmax_rows<T: Real>(x: &mut [T], width: usize) {
    for row in x.chunks_exact_mut(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

/// Mean cross-entropy of `logits` against `targets`, and its gradient
/// scaled by `scale`. Per-position losses are returned in `f64`.
pub fn cross_entropy<T: Real>(logits: &[T], targets: &[u32], vocab: usize, scale: T) -> (f64, Vec<T>) {
    let n = targets.len();
    let mut probs = logits.to_vec();
    softmax_rows(&mut probs, vocab);
    let mut total = 0.0;
    let coef = scale / T::c(n as f64);
    for (i, &t) in targets.iter().enumerate() {
        let row = &mut probs[i * vocab..(i + 1) * vocab];
        total -= row[t as usize].to_f64().unwrap().max(f64::MIN_POSITIVE).ln();
        row[t as usize] -= T::one();
        for v in row.iter_mut() {
            *v *= coef;
        }
    }
    (total / n as f64, probs)
}

/// Sum of per-position negative log-likelihoods (no gradient).
pub fn total_nll<T: Real>(logits: &[T], targets: &[u32], vocab: usize) -> f64 {
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits[i * vocab..(i + 1) * vocab];
        let max = row.iter().map(|v| v.to_f64().unwrap()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v.to_f64().unwrap() - max).exp()).sum();
        total += max + z.ln() - row[t as usize].to_f64().unwrap();
    }
    total
}
