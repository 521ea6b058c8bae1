//! Independent oracles for the integration and acceptance tests.
//!
//! Nothing here calls into the code paths being checked: the classifier loss
//! is recomputed with plain nested loops over the raw tensors, and AP is
//! recomputed by its definition with a double loop.

#![allow(dead_code)]

use embedkit::classifier::Params;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Mean cross-entropy of the classifier, plus the ReLU activity pattern of
/// every sample (to detect finite-difference steps that cross a kink).
pub fn naive_loss(p: &Params<f64>, batch: &[(Vec<f64>, usize)]) -> (f64, Vec<bool>) {
    let [(_, w1), (_, b1), (_, w2), (_, b2)] = p.tensors();
    let (inp, hid, cls) = (p.input_dim(), p.hidden_dim(), p.num_classes());
    let mut total = 0.0;
    let mut pattern = Vec::new();
    for (x, y) in batch {
        let mut h = vec![0.0; hid];
        for j in 0..hid {
            let mut z = b1[j];
            for k in 0..inp {
                z += w1[j * inp + k] * x[k];
            }
            pattern.push(z > 0.0);
            h[j] = if z > 0.0 { z } else { 0.0 };
        }
        let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let mut logits = vec![0.0; cls];
        for c in 0..cls {
            logits[c] = b2[c];
            for j in 0..hid {
                logits[c] += w2[c * hid + j] * h[j] / norm;
            }
        }
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[*y];
    }
    (total / batch.len() as f64, pattern)
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub coords: usize,
    pub kink_skips: usize,
}

/// Relative error with a floor on the denominator so that coordinates whose
/// true gradient is (near) zero are judged on absolute error.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compare analytic gradients with central differences on every coordinate.
pub fn check_gradients(p: &Params<f64>, batch: &[(Vec<f64>, usize)], h: f64, floor: f64) -> GradCheck {
    let refs: Vec<(&[f64], usize)> = batch.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let (_, grads) = p.loss_and_grad(&refs).expect("valid batch");
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, t)| t.to_vec()).collect();
    let mut out = GradCheck { max_rel_err: 0.0, coords: 0, kink_skips: 0 };
    for t in 0..4 {
        for i in 0..analytic[t].len() {
            let mut plus = p.clone();
            plus.tensors_mut()[t].1[i] += h;
            let mut minus = p.clone();
            minus.tensors_mut()[t].1[i] -= h;
            let (lp, pat_p) = naive_loss(&plus, batch);
            let (lm, pat_m) = naive_loss(&minus, batch);
            if pat_p != pat_m {
                out.kink_skips += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            out.max_rel_err = out.max_rel_err.max(rel_err(analytic[t][i], numeric, floor));
            out.coords += 1;
        }
    }
    out
}

/// A random small classifier (dims <= 16) with non-zero biases and a batch.
pub fn random_problem(seed: u64) -> (Params<f64>, Vec<(Vec<f64>, usize)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inp = rng.random_range(2..=16);
    let hid = rng.random_range(2..=16);
    let cls = rng.random_range(2..=16);
    let mut p = Params::<f64>::init(inp, hid, cls, seed);
    for (_, t) in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let n = rng.random_range(1..=8);
    let batch = (0..n)
        .map(|_| {
            let x = (0..inp).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            (x, rng.random_range(0..cls))
        })
        .collect();
    (p, batch)
}

/// AP by definition: for every relevant item, count the relevant items at or
/// above its rank and divide by the rank; average over the relevant set.
pub fn brute_force_ap(relevance: &[bool]) -> Option<f64> {
    let total = relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut sum = 0.0;
    for i in 0..relevance.len() {
        if !relevance[i] {
            continue;
        }
        let mut above = 0usize;
        for j in 0..=i {
            if relevance[j] {
                above += 1;
            }
        }
        sum += above as f64 / (i + 1) as f64;
    }
    Some(sum / total as f64)
}

/// Synthetic config with 20 classes, dim 64 and 50/10/10 items per class.
pub fn synth(seed: u64, sigma_image: f64, sigma_text: f64) -> embedkit::SynthConfig {
    embedkit::SynthConfig {
        num_classes: 20,
        train_per_class: 50,
        val_per_class: 10,
        test_per_class: 10,
        dim: 64,
        sigma_image,
        sigma_text,
        seed,
    }
}

/// Nearest class text by brute force over every (item, class) pair.
pub fn nearest_class(query: &[f32], texts: &embedkit::EmbeddingStore) -> String {
    let mut best: Option<(f64, &str)> = None;
    for (id, v) in texts.iter() {
        let mut d = 0.0;
        let (mut na, mut nb) = (0.0, 0.0);
        for k in 0..v.len() {
            d += query[k] as f64 * v[k] as f64;
            na += query[k] as f64 * query[k] as f64;
            nb += v[k] as f64 * v[k] as f64;
        }
        let s = d / (na.sqrt() * nb.sqrt());
        if best.map_or(true, |(b, _)| s > b) {
            best = Some((s, id));
        }
    }
    best.unwrap().1.to_string()
}
