//! Reference classifier: mean-pooled token embeddings, one ReLU hidden layer
//! with inverted dropout, and a sigmoid (binary) or softmax (multiclass)
//! output. Forward and backward passes are written out by hand over a single
//! flat parameter vector.
//!
//! Parameter layout, row-major, in order:
//!
//! | block          | shape              |
//! |----------------|--------------------|
//! | embedding      | `vocab x d_emb`    |
//! | hidden weights | `d_emb x d_hidden` |
//! | hidden bias    | `d_hidden`         |
//! | output weights | `d_hidden x out`   |
//! | output bias    | `out`              |
//!
//! Row 0 of the embedding is the padding token. It is zero at init, pad
//! tokens are excluded from pooling, so its gradient is always zero.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::corpus::LabelMap;
use crate::error::{Error, Result};
use crate::featurizer::{FeatureVector, Vocabulary, PAD_INDEX};
use crate::scalar::Scalar;
use crate::SeededRng;

pub const DROPOUT_RATE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub d_emb: usize,
    pub d_hidden: usize,
    /// 1 for a binary sigmoid head, `p` for a softmax head.
    pub out_dim: usize,
}

impl Dims {
    pub fn new(vocab: usize, d_emb: usize, d_hidden: usize, out_dim: usize) -> Result<Self> {
        if vocab == 0 || d_emb == 0 || d_hidden == 0 || out_dim == 0 || out_dim == 2 {
            return Err(Error::InvalidArgument(format!(
                "invalid model dims: vocab={vocab} d_emb={d_emb} d_hidden={d_hidden} out={out_dim}"
            )));
        }
        Ok(Self {
            vocab,
            d_emb,
            d_hidden,
            out_dim,
        })
    }

    /// Sigmoid head for two classes, softmax head otherwise.
    pub fn for_classes(
        vocab: usize,
        d_emb: usize,
        d_hidden: usize,
        num_classes: usize,
    ) -> Result<Self> {
        match num_classes {
            0 | 1 => Err(Error::InvalidArgument("need at least two classes".into())),
            2 => Self::new(vocab, d_emb, d_hidden, 1),
            p => Self::new(vocab, d_emb, d_hidden, p),
        }
    }

    pub fn num_classes(&self) -> usize {
        if self.out_dim == 1 {
            2
        } else {
            self.out_dim
        }
    }

    pub fn is_binary(&self) -> bool {
        self.out_dim == 1
    }

    fn emb(&self) -> Range<usize> {
        0..self.vocab * self.d_emb
    }

    fn w1(&self) -> Range<usize> {
        let s = self.emb().end;
        s..s + self.d_emb * self.d_hidden
    }

    fn b1(&self) -> Range<usize> {
        let s = self.w1().end;
        s..s + self.d_hidden
    }

    fn w2(&self) -> Range<usize> {
        let s = self.b1().end;
        s..s + self.d_hidden * self.out_dim
    }

    fn b2(&self) -> Range<usize> {
        let s = self.w2().end;
        s..s + self.out_dim
    }

    pub fn n_params(&self) -> usize {
        self.b2().end
    }
}

/// Whether dropout is active; training mode draws masks from the given RNG.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut SeededRng),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ModelState<T> {
    dims: Dims,
    seed: u64,
    theta: Vec<T>,
}

/// Intermediate activations of one forward pass, consumed by backward.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    batch_len: usize,
    token_counts: Vec<usize>,
    pooled: Vec<T>,
    pre_hidden: Vec<T>,
    mask: Vec<T>,
    hidden: Vec<T>,
    logits: Vec<T>,
}

impl<T> ForwardCache<T> {
    pub fn dropout_mask(&self) -> &[T] {
        &self.mask
    }

    pub fn logits(&self) -> &[T] {
        &self.logits
    }
}

#[derive(Debug, Clone)]
pub struct Forward<T> {
    /// `batch x out_dim`: sigmoid output (probability of class 1) or softmax row.
    pub probs: Vec<T>,
    pub cache: ForwardCache<T>,
}

impl<T: Scalar> Forward<T> {
    pub fn len(&self) -> usize {
        self.cache.batch_len
    }

    pub fn is_empty(&self) -> bool {
        self.cache.batch_len == 0
    }

    /// Full class distribution for example `i`.
    pub fn class_probs(&self, i: usize) -> Vec<T> {
        let out = self.probs.len() / self.cache.batch_len.max(1);
        let row = &self.probs[i * out..(i + 1) * out];
        if out == 1 {
            vec![T::one() - row[0], row[0]]
        } else {
            row.to_vec()
        }
    }

    pub fn predictions(&self) -> Vec<usize> {
        let out = self.cache.logits.len() / self.cache.batch_len.max(1);
        self.cache
            .logits
            .chunks(out.max(1))
            .map(|z| {
                if out == 1 {
                    usize::from(z[0] > T::zero())
                } else {
                    argmax(z)
                }
            })
            .collect()
    }
}

fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

fn log_sum_exp<T: Scalar>(z: &[T]) -> T {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    m + z.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

impl<T: Scalar> ModelState<T> {
    /// Uniform(-s, s) weights with `s = sqrt(6 / (fan_in + fan_out))`, zero
    /// biases, zero padding row.
    pub fn init(seed: u64, dims: Dims) -> Self {
        let mut rng = SeededRng::seed_from_u64(seed);
        let mut theta = vec![T::zero(); dims.n_params()];
        let blocks = [
            (dims.emb(), dims.vocab, dims.d_emb),
            (dims.w1(), dims.d_emb, dims.d_hidden),
            (dims.w2(), dims.d_hidden, dims.out_dim),
        ];
        for (range, fan_in, fan_out) in blocks {
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut theta[range] {
                *w = T::lit(rng.gen_range(-s..s));
            }
        }
        for w in &mut theta[0..dims.d_emb] {
            *w = T::zero();
        }
        Self { dims, seed, theta }
    }

    pub fn from_parts(dims: Dims, seed: u64, theta: Vec<T>) -> Result<Self> {
        if theta.len() != dims.n_params() {
            return Err(Error::LengthMismatch {
                expected: dims.n_params(),
                actual: theta.len(),
            });
        }
        Ok(Self { dims, seed, theta })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    /// Flat parameter vector.
    pub fn params(&self) -> &[T] {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.theta
    }

    pub fn embedding(&self) -> &[T] {
        &self.theta[self.dims.emb()]
    }

    pub fn embedding_mut(&mut self) -> &mut [T] {
        let r = self.dims.emb();
        &mut self.theta[r]
    }

    pub fn hidden_weights(&self) -> &[T] {
        &self.theta[self.dims.w1()]
    }

    pub fn hidden_weights_mut(&mut self) -> &mut [T] {
        let r = self.dims.w1();
        &mut self.theta[r]
    }

    pub fn hidden_bias(&self) -> &[T] {
        &self.theta[self.dims.b1()]
    }

    pub fn hidden_bias_mut(&mut self) -> &mut [T] {
        let r = self.dims.b1();
        &mut self.theta[r]
    }

    pub fn output_weights(&self) -> &[T] {
        &self.theta[self.dims.w2()]
    }

    pub fn output_weights_mut(&mut self) -> &mut [T] {
        let r = self.dims.w2();
        &mut self.theta[r]
    }

    pub fn output_bias(&self) -> &[T] {
        &self.theta[self.dims.b2()]
    }

    pub fn output_bias_mut(&mut self) -> &mut [T] {
        let r = self.dims.b2();
        &mut self.theta[r]
    }

    fn check_batch(&self, batch: &[FeatureVector]) -> Result<()> {
        for (i, fv) in batch.iter().enumerate() {
            if let Some(&bad) = fv
                .indices()
                .iter()
                .find(|&&t| t as usize >= self.dims.vocab)
            {
                return Err(Error::InvalidArgument(format!(
                    "example {i}: token index {bad} outside vocabulary of {}",
                    self.dims.vocab
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, batch: &[FeatureVector], mode: Mode<'_>) -> Result<Forward<T>> {
        self.check_batch(batch)?;
        let Dims {
            d_emb: e_dim,
            d_hidden: h_dim,
            out_dim: o_dim,
            ..
        } = self.dims;
        let n = batch.len();
        let emb = self.embedding();
        let w1 = self.hidden_weights();
        let b1 = self.hidden_bias();
        let w2 = self.output_weights();
        let b2 = self.output_bias();

        let mut token_counts = Vec::with_capacity(n);
        let mut pooled = vec![T::zero(); n * e_dim];
        let mut pre_hidden = vec![T::zero(); n * h_dim];
        let mut hidden = vec![T::zero(); n * h_dim];
        let mut logits = vec![T::zero(); n * o_dim];
        let mut probs = vec![T::zero(); n * o_dim];

        let mut mask = vec![T::one(); n * h_dim];
        if let Mode::Train(rng) = mode {
            let keep = T::lit(1.0 / (1.0 - DROPOUT_RATE));
            for m in &mut mask {
                *m = if rng.gen_bool(DROPOUT_RATE) {
                    T::zero()
                } else {
                    keep
                };
            }
        }

        for (i, fv) in batch.iter().enumerate() {
            let pool = &mut pooled[i * e_dim..(i + 1) * e_dim];
            let mut count = 0usize;
            for &t in fv.indices() {
                if t == PAD_INDEX {
                    continue;
                }
                count += 1;
                let row = &emb[t as usize * e_dim..(t as usize + 1) * e_dim];
                for (p, &w) in pool.iter_mut().zip(row) {
                    *p = *p + w;
                }
            }
            if count > 0 {
                let inv = T::one() / T::from_count(count);
                for p in pool.iter_mut() {
                    *p = *p * inv;
                }
            }
            token_counts.push(count);

            let pre = &mut pre_hidden[i * h_dim..(i + 1) * h_dim];
            pre.copy_from_slice(b1);
            for (e, &x) in pool.iter().enumerate() {
                for (z, &w) in pre.iter_mut().zip(&w1[e * h_dim..(e + 1) * h_dim]) {
                    *z = *z + x * w;
                }
            }
            let hid = &mut hidden[i * h_dim..(i + 1) * h_dim];
            let msk = &mask[i * h_dim..(i + 1) * h_dim];
            for h in 0..h_dim {
                hid[h] = pre[h].max(T::zero()) * msk[h];
            }

            let z = &mut logits[i * o_dim..(i + 1) * o_dim];
            z.copy_from_slice(b2);
            for (h, &a) in hid.iter().enumerate() {
                for (zo, &w) in z.iter_mut().zip(&w2[h * o_dim..(h + 1) * o_dim]) {
                    *zo = *zo + a * w;
                }
            }
            let out = &mut probs[i * o_dim..(i + 1) * o_dim];
            if o_dim == 1 {
                out[0] = sigmoid(z[0]);
            } else {
                let lse = log_sum_exp(z);
                for (p, &zo) in out.iter_mut().zip(z.iter()) {
                    *p = (zo - lse).exp();
                }
            }
        }

        Ok(Forward {
            probs,
            cache: ForwardCache {
                batch_len: n,
                token_counts,
                pooled,
                pre_hidden,
                mask,
                hidden,
                logits,
            },
        })
    }

    fn check_labels(
        &self,
        cache: &ForwardCache<T>,
        batch: &[FeatureVector],
        labels: &[usize],
    ) -> Result<()> {
        if batch.len() != cache.batch_len {
            return Err(Error::LengthMismatch {
                expected: cache.batch_len,
                actual: batch.len(),
            });
        }
        if labels.len() != cache.batch_len {
            return Err(Error::LengthMismatch {
                expected: cache.batch_len,
                actual: labels.len(),
            });
        }
        if cache.logits.len() != cache.batch_len * self.dims.out_dim {
            return Err(Error::LengthMismatch {
                expected: cache.batch_len * self.dims.out_dim,
                actual: cache.logits.len(),
            });
        }
        let p = self.dims.num_classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= p) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {p} classes"
            )));
        }
        Ok(())
    }

    /// Mean cross-entropy of the cached logits against `labels`.
    pub fn loss(&self, fwd: &Forward<T>, labels: &[usize]) -> Result<T> {
        let cache = &fwd.cache;
        if labels.len() != cache.batch_len {
            return Err(Error::LengthMismatch {
                expected: cache.batch_len,
                actual: labels.len(),
            });
        }
        if cache.batch_len == 0 {
            return Ok(T::zero());
        }
        let o_dim = self.dims.out_dim;
        let mut total = T::zero();
        for (z, &y) in cache.logits.chunks(o_dim).zip(labels) {
            total = total
                + if o_dim == 1 {
                    softplus(z[0]) - if y == 1 { z[0] } else { T::zero() }
                } else {
                    log_sum_exp(z) - z[y]
                };
        }
        Ok(total / T::from_count(cache.batch_len))
    }

    /// Gradient of the mean cross-entropy over the batch.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        batch: &[FeatureVector],
        labels: &[usize],
    ) -> Result<Vec<T>> {
        let mut grad = vec![T::zero(); self.n_params()];
        self.backward_into(cache, batch, labels, &mut grad)?;
        Ok(grad)
    }

    /// Add the mean cross-entropy gradient into `grad`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache<T>,
        batch: &[FeatureVector],
        labels: &[usize],
        grad: &mut [T],
    ) -> Result<()> {
        self.check_labels(cache, batch, labels)?;
        if grad.len() != self.n_params() {
            return Err(Error::LengthMismatch {
                expected: self.n_params(),
                actual: grad.len(),
            });
        }
        let n = cache.batch_len;
        if n == 0 {
            return Ok(());
        }
        let dims = self.dims;
        let (e_dim, h_dim, o_dim) = (dims.d_emb, dims.d_hidden, dims.out_dim);
        let w1 = self.hidden_weights();
        let w2 = self.output_weights();
        let scale = T::one() / T::from_count(n);

        let (g_emb, rest) = grad.split_at_mut(dims.w1().start);
        let (g_w1, rest) = rest.split_at_mut(e_dim * h_dim);
        let (g_b1, rest) = rest.split_at_mut(h_dim);
        let (g_w2, g_b2) = rest.split_at_mut(h_dim * o_dim);

        let mut dz = vec![T::zero(); o_dim];
        let mut dpre = vec![T::zero(); h_dim];
        let mut dpool = vec![T::zero(); e_dim];
        for i in 0..n {
            let z = &cache.logits[i * o_dim..(i + 1) * o_dim];
            let y = labels[i];
            if o_dim == 1 {
                let target = if y == 1 { T::one() } else { T::zero() };
                dz[0] = (sigmoid(z[0]) - target) * scale;
            } else {
                let lse = log_sum_exp(z);
                for (o, d) in dz.iter_mut().enumerate() {
                    let p = (z[o] - lse).exp();
                    let target = if o == y { T::one() } else { T::zero() };
                    *d = (p - target) * scale;
                }
            }

            let hid = &cache.hidden[i * h_dim..(i + 1) * h_dim];
            for (h, &a) in hid.iter().enumerate() {
                for (g, &d) in g_w2[h * o_dim..(h + 1) * o_dim].iter_mut().zip(&dz) {
                    *g = *g + a * d;
                }
            }
            for (g, &d) in g_b2.iter_mut().zip(&dz) {
                *g = *g + d;
            }

            let pre = &cache.pre_hidden[i * h_dim..(i + 1) * h_dim];
            let msk = &cache.mask[i * h_dim..(i + 1) * h_dim];
            for h in 0..h_dim {
                let dh: T = w2[h * o_dim..(h + 1) * o_dim]
                    .iter()
                    .zip(&dz)
                    .map(|(&w, &d)| w * d)
                    .sum();
                dpre[h] = if pre[h] > T::zero() {
                    dh * msk[h]
                } else {
                    T::zero()
                };
            }

            let pool = &cache.pooled[i * e_dim..(i + 1) * e_dim];
            for (e, &x) in pool.iter().enumerate() {
                for (g, &d) in g_w1[e * h_dim..(e + 1) * h_dim].iter_mut().zip(&dpre) {
                    *g = *g + x * d;
                }
            }
            for (g, &d) in g_b1.iter_mut().zip(&dpre) {
                *g = *g + d;
            }

            let count = cache.token_counts[i];
            if count == 0 {
                continue;
            }
            let inv = T::one() / T::from_count(count);
            for (e, dp) in dpool.iter_mut().enumerate() {
                let s: T = w1[e * h_dim..(e + 1) * h_dim]
                    .iter()
                    .zip(&dpre)
                    .map(|(&w, &d)| w * d)
                    .sum();
                *dp = s * inv;
            }
            for &t in batch[i].indices() {
                if t == PAD_INDEX {
                    continue;
                }
                let row = &mut g_emb[t as usize * e_dim..(t as usize + 1) * e_dim];
                for (g, &d) in row.iter_mut().zip(&dpool) {
                    *g = *g + d;
                }
            }
        }
        Ok(())
    }

    /// Gradient of `log p(label | example)` with dropout disabled.
    pub fn log_likelihood_grad(&self, example: &FeatureVector, label: usize) -> Result<Vec<T>> {
        let batch = std::slice::from_ref(example);
        let fwd = self.forward(batch, Mode::Eval)?;
        let mut grad = self.backward(&fwd.cache, batch, &[label])?;
        for g in &mut grad {
            *g = -*g;
        }
        Ok(grad)
    }

    /// Eval-mode class predictions.
    pub fn predict(&self, batch: &[FeatureVector]) -> Result<Vec<usize>> {
        Ok(self.forward(batch, Mode::Eval)?.predictions())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            scalar: std::any::type_name::<T>().into(),
            dims: self.dims,
            seed: self.seed,
            theta: self.theta.clone(),
            vocabulary: None,
            label_map: None,
            max_len: None,
        }
    }
}

pub const CHECKPOINT_FORMAT: &str = "seqtarget-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized model, optionally bundled with the featurizer state needed to
/// evaluate raw text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    pub scalar: String,
    pub dims: Dims,
    pub seed: u64,
    pub theta: Vec<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<Vocabulary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_map: Option<LabelMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn into_model(self) -> Result<ModelState<T>> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        if self.scalar != std::any::type_name::<T>() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, expected {}",
                self.scalar,
                std::any::type_name::<T>()
            )));
        }
        ModelState::from_parts(self.dims, self.seed, self.theta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
