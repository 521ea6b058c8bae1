//! Shallow classifier over frozen embeddings.
//!
//! ```text
//! z = W1·x + b1      (hidden_dim)
//! h = relu(z)
//! n = h / max(‖h‖, 1e-12)
//! logits = W2·n + b2 (num_classes)
//! p = softmax(logits)
//! ```
//!
//! Gradients are derived by hand. The L2-normalization layer contributes the
//! Jacobian `(I − n nᵀ) / ‖h‖`. The math is generic over [`Scalar`] so the
//! same code runs in `f32` for training and in `f64` for gradient checks.
//!
//! Batched products are split across rayon workers by output row only; every
//! reduction runs in a fixed order, so results do not depend on the thread
//! count.

use std::fmt::Debug;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::path::Path;

use indexmap::IndexMap;
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{read_u32, write_atomic, EmbeddingStore};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CPRM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Floor on ‖h‖ in the normalization layer.
pub const NORM_FLOOR: f64 = 1e-12;

pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Weights and biases of the classifier, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    input_dim: usize,
    hidden_dim: usize,
    num_classes: usize,
    w1: Vec<T>,
    b1: Vec<T>,
    w2: Vec<T>,
    b2: Vec<T>,
}

pub type ClassifierParams = Params<f32>;

impl<T: Scalar> Params<T> {
    pub fn zeros(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            num_classes,
            w1: vec![T::zero(); hidden_dim * input_dim],
            b1: vec![T::zero(); hidden_dim],
            w2: vec![T::zero(); num_classes * hidden_dim],
            b2: vec![T::zero(); num_classes],
        }
    }

    pub fn from_parts(
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        w1: Vec<T>,
        b1: Vec<T>,
        w2: Vec<T>,
        b2: Vec<T>,
    ) -> Result<Self> {
        let p = Self {
            input_dim,
            hidden_dim,
            num_classes,
            w1,
            b1,
            w2,
            b2,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("classifier dimensions must be positive".into()));
        }
        let expect = [
            self.hidden_dim * self.input_dim,
            self.hidden_dim,
            self.num_classes * self.hidden_dim,
            self.num_classes,
        ];
        for ((name, t), want) in self.tensors().into_iter().zip(expect) {
            if t.len() != want {
                return Err(Error::Shape {
                    expected: want,
                    actual: t.len(),
                });
            }
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::Integrity(format!("non-finite entry in {name}")));
            }
        }
        Ok(())
    }

    /// Glorot-uniform weights from a seeded ChaCha8 stream (W1 first, then
    /// W2), zero biases.
    pub fn init(input_dim: usize, hidden_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(input_dim, hidden_dim, num_classes);
        let mut fill = |w: &mut [T], fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in w.iter_mut() {
                *x = T::from_f64(rng.random_range(-limit..=limit));
            }
        };
        fill(&mut p.w1, input_dim, hidden_dim);
        fill(&mut p.w2, hidden_dim, num_classes);
        p
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `(name, values)` for W1, b1, W2, b2 in that order.
    pub fn tensors(&self) -> [(&'static str, &[T]); 4] {
        [
            ("W1", &self.w1),
            ("b1", &self.b1),
            ("W2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [T]); 4] {
        [
            ("W1", &mut self.w1),
            ("b1", &mut self.b1),
            ("W2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::from_f64(x.to_f64())).collect();
        Params {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            num_classes: self.num_classes,
            w1: conv(&self.w1),
            b1: conv(&self.b1),
            w2: conv(&self.w2),
            b2: conv(&self.b2),
        }
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.input_dim == other.input_dim
            && self.hidden_dim == other.hidden_dim
            && self.num_classes == other.num_classes
    }

    fn w1_row(&self, j: usize) -> &[T] {
        &self.w1[j * self.input_dim..(j + 1) * self.input_dim]
    }

    fn w2_row(&self, c: usize) -> &[T] {
        &self.w2[c * self.hidden_dim..(c + 1) * self.hidden_dim]
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Shape {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[T]) -> Result<(Vec<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let pre_activation: Vec<T> = (0..self.hidden_dim)
            .map(|j| self.b1[j] + dot(self.w1_row(j), x))
            .collect();
        let hidden: Vec<T> = pre_activation.iter().map(|&z| relu(z)).collect();
        let (normalized, hidden_norm) = l2_forward(&hidden);
        let logits: Vec<T> = (0..self.num_classes)
            .map(|c| self.b2[c] + dot(self.w2_row(c), &normalized))
            .collect();
        let probs = softmax(&logits);
        let cache = ForwardCache {
            input: x.to_vec(),
            pre_activation,
            hidden,
            normalized,
            hidden_norm,
            logits,
        };
        Ok((probs, cache))
    }

    /// Mean cross-entropy over `batch` and its exact gradient.
    pub fn loss_and_grad(&self, batch: &[(&[T], usize)]) -> Result<(f64, Params<T>)> {
        if batch.is_empty() {
            return Err(Error::Range("empty batch".into()));
        }
        for (x, y) in batch {
            self.check_input(x)?;
            if *y >= self.num_classes {
                return Err(Error::Range(format!(
                    "class index {y} out of range for {} classes",
                    self.num_classes
                )));
            }
        }
        let (hd, nc, id) = (self.hidden_dim, self.num_classes, self.input_dim);
        let bsz = batch.len();
        let inv_b = T::one() / T::from_f64(bsz as f64);

        // Forward, one row per sample.
        let mut z = vec![T::zero(); bsz * hd];
        z.par_chunks_mut(hd).zip(batch).for_each(|(zrow, (x, _))| {
            for (j, zj) in zrow.iter_mut().enumerate() {
                *zj = self.b1[j] + dot(self.w1_row(j), x);
            }
        });
        let mut n = vec![T::zero(); bsz * hd];
        let mut norms = vec![T::zero(); bsz];
        for ((zrow, nrow), norm) in z.chunks(hd).zip(n.chunks_mut(hd)).zip(norms.iter_mut()) {
            let h: Vec<T> = zrow.iter().map(|&v| relu(v)).collect();
            let (nv, r) = l2_forward(&h);
            nrow.copy_from_slice(&nv);
            *norm = r;
        }
        // logits -> dlogits = (p - onehot) / B, loss accumulated in f64.
        let mut g = vec![T::zero(); bsz * nc];
        let mut loss = 0.0f64;
        for ((grow, nrow), (_, y)) in g.chunks_mut(nc).zip(n.chunks(hd)).zip(batch) {
            let logits: Vec<T> = (0..nc)
                .map(|c| self.b2[c] + dot(self.w2_row(c), nrow))
                .collect();
            let (probs, lse) = softmax_with_lse(&logits);
            loss += (lse - logits[*y]).to_f64();
            for (gc, &pc) in grow.iter_mut().zip(&probs) {
                *gc = pc * inv_b;
            }
            grow[*y] -= inv_b;
        }
        loss /= bsz as f64;

        let mut grads = Params::zeros(id, hd, nc);
        grads
            .w2
            .par_chunks_mut(hd)
            .zip(grads.b2.par_iter_mut())
            .enumerate()
            .for_each(|(c, (row, bias))| {
                for (grow, nrow) in g.chunks(nc).zip(n.chunks(hd)) {
                    axpy(grow[c], nrow, row);
                    *bias += grow[c];
                }
            });

        // Back through W2, the L2 layer and the ReLU mask.
        let mut dz = vec![T::zero(); bsz * hd];
        dz.par_chunks_mut(hd).enumerate().for_each(|(b, dzrow)| {
            let grow = &g[b * nc..(b + 1) * nc];
            let mut dn = vec![T::zero(); hd];
            for (c, &gc) in grow.iter().enumerate() {
                axpy(gc, self.w2_row(c), &mut dn);
            }
            let dh = l2_backward(&n[b * hd..(b + 1) * hd], norms[b], &dn);
            for ((d, &zv), &dhv) in dzrow.iter_mut().zip(&z[b * hd..(b + 1) * hd]).zip(&dh) {
                *d = if zv > T::zero() { dhv } else { T::zero() };
            }
        });

        grads
            .w1
            .par_chunks_mut(id)
            .zip(grads.b1.par_iter_mut())
            .enumerate()
            .for_each(|(j, (row, bias))| {
                for (dzrow, (x, _)) in dz.chunks(hd).zip(batch) {
                    axpy(dzrow[j], x, row);
                    *bias += dzrow[j];
                }
            });

        Ok((loss, grads))
    }

    /// Predicted class: argmax of the probabilities, lowest index on ties.
    pub fn classify(&self, x: &[T]) -> Result<usize> {
        let (probs, _) = self.forward(x)?;
        Ok(argmax(&probs))
    }
}

/// Activations retained by [`Params::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub input: Vec<T>,
    pub pre_activation: Vec<T>,
    pub hidden: Vec<T>,
    pub normalized: Vec<T>,
    /// ‖h‖ before flooring.
    pub hidden_norm: T,
    pub logits: Vec<T>,
}

fn relu<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z
    } else {
        T::zero()
    }
}

/// `h / max(‖h‖, 1e-12)` and the unfloored norm.
pub fn l2_forward<T: Scalar>(h: &[T]) -> (Vec<T>, T) {
    let norm = dot(h, h).sqrt();
    let denom = norm.max(T::from_f64(NORM_FLOOR));
    (h.iter().map(|&v| v / denom).collect(), norm)
}

/// Apply the normalization layer's Jacobian (symmetric) to `v`, given the
/// layer output `n` and unfloored input norm.
///
/// Above the floor this is `(I − n nᵀ) v / ‖h‖`; below it the layer is a
/// plain scale by `1/1e-12`, and an exactly zero input yields a zero
/// Jacobian.
pub fn l2_backward<T: Scalar>(n: &[T], norm: T, v: &[T]) -> Vec<T> {
    let floor = T::from_f64(NORM_FLOOR);
    if norm == T::zero() {
        vec![T::zero(); v.len()]
    } else if norm <= floor {
        v.iter().map(|&x| x / floor).collect()
    } else {
        let proj = dot(n, v);
        v.iter().zip(n).map(|(&vi, &ni)| (vi - ni * proj) / norm).collect()
    }
}

/// `J(h)·v` for the normalization layer evaluated at `h`.
pub fn l2_jacobian_apply<T: Scalar>(h: &[T], v: &[T]) -> Vec<T> {
    let (n, norm) = l2_forward(h);
    l2_backward(&n, norm, v)
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    softmax_with_lse(logits).0
}

/// Softmax with max-logit subtraction, plus log-sum-exp of the logits.
fn softmax_with_lse<T: Scalar>(logits: &[T]) -> (Vec<T>, T) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    let probs = exps.into_iter().map(|e| e / sum).collect();
    (probs, max + sum.ln())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities {
    pub probs: Vec<f32>,
}

impl ClassProbabilities {
    pub fn predicted(&self) -> usize {
        argmax(&self.probs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            learning_rate: 1e-4,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

struct Adam {
    m: ClassifierParams,
    v: ClassifierParams,
    step: i32,
}

impl Adam {
    fn new(like: &ClassifierParams) -> Self {
        let z = Params::zeros(like.input_dim, like.hidden_dim, like.num_classes);
        Self {
            m: z.clone(),
            v: z,
            step: 0,
        }
    }

    fn update(&mut self, p: &mut ClassifierParams, g: &ClassifierParams, cfg: &TrainConfig) {
        self.step += 1;
        let b1 = cfg.beta1 as f32;
        let b2 = cfg.beta2 as f32;
        let c1 = (1.0 - cfg.beta1.powi(self.step)) as f32;
        let c2 = (1.0 - cfg.beta2.powi(self.step)) as f32;
        let lr = cfg.learning_rate as f32;
        let eps = cfg.adam_eps as f32;
        let tensors = p
            .tensors_mut()
            .into_iter()
            .zip(g.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((_, pt), (_, gt)), (_, mt)), (_, vt)) in tensors {
            pt.par_iter_mut()
                .zip(gt.par_iter())
                .zip(mt.par_iter_mut())
                .zip(vt.par_iter_mut())
                .for_each(|(((pi, &gi), mi), vi)| {
                    *mi = b1 * *mi + (1.0 - b1) * gi;
                    *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                    let mhat = *mi / c1;
                    let vhat = *vi / c2;
                    *pi -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

/// Train with Adam on mini-batches of a per-epoch seeded shuffle.
///
/// The final partial batch of each epoch is used. With `epochs == 0` the
/// initial parameters are returned unchanged.
pub fn train(
    p0: &ClassifierParams,
    cfg: &TrainConfig,
    train_set: &[(&[f32], usize)],
    val_set: Option<&[(&[f32], usize)]>,
) -> Result<(ClassifierParams, Vec<EpochReport>)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyUniverse("training set is empty".into()));
    }
    let mut params = p0.clone();
    let mut adam = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut reports = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let last_good = params.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f32], usize)> = chunk.iter().map(|&i| train_set[i]).collect();
            let (loss, grads) = params.loss_and_grad(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_good: Box::new(last_good),
                });
            }
            loss_sum += loss * batch.len() as f64;
            adam.update(&mut params, &grads, cfg);
        }
        let val_accuracy = match val_set {
            Some(v) if !v.is_empty() => Some(accuracy_on(&params, v)?),
            _ => None,
        };
        reports.push(EpochReport {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_accuracy,
        });
    }
    Ok((params, reports))
}

/// Fraction of samples whose argmax prediction matches the label.
pub fn accuracy_on<T: Scalar>(p: &Params<T>, samples: &[(&[T], usize)]) -> Result<f64> {
    let hits = samples
        .par_iter()
        .map(|(x, y)| p.classify(x).map(|c| (c == *y) as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / samples.len() as f64)
}

/// Class probabilities for each id, in the order given.
pub fn predict(
    p: &ClassifierParams,
    store: &EmbeddingStore,
    ids: &[&str],
) -> Result<IndexMap<String, ClassProbabilities>> {
    if store.dim() != p.input_dim {
        return Err(Error::Shape {
            expected: p.input_dim,
            actual: store.dim(),
        });
    }
    let probs = ids
        .par_iter()
        .map(|id| {
            let x = store
                .get(id)
                .ok_or_else(|| Error::Lookup(format!("id {id:?} not in store")))?;
            let (probs, _) = p.forward(x)?;
            Ok((id.to_string(), ClassProbabilities { probs }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(probs.into_iter().collect())
}

impl ClassifierParams {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), |w| self.write_to(w))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for d in [self.input_dim, self.hidden_dim, self.num_classes] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for (_, t) in self.tensors() {
            for x in t {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path.as_ref())?))
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected CPRM")));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let input_dim = read_u32(&mut r)? as usize;
        let hidden_dim = read_u32(&mut r)? as usize;
        let num_classes = read_u32(&mut r)? as usize;
        let mut read_tensor = |len: usize| -> Result<Vec<f32>> {
            let mut raw = vec![0u8; len * 4];
            r.read_exact(&mut raw)?;
            Ok(raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect())
        };
        let w1 = read_tensor(hidden_dim * input_dim)?;
        let b1 = read_tensor(hidden_dim)?;
        let w2 = read_tensor(num_classes * hidden_dim)?;
        let b2 = read_tensor(num_classes)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Self::from_parts(input_dim, hidden_dim, num_classes, w1, b1, w2, b2)
    }

    /// Bitwise equality of all entries.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.same_shape(other)
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|((_, a), (_, b))| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}
