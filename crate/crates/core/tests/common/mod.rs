//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use vitprobe::rng::keyed_rng;
use vitprobe::vit::{forward_from, trace_image, ModelConfig, ModelWeights};
use vitprobe::Tensor;

/// Cross-entropy from logits via log-sum-exp, written out independently of
/// the library's loss.
pub fn xent_oracle(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Toy-config weights with every tensor jittered so biases, betas and gammas
/// are all away from their initial constants.
pub fn jittered_weights(cfg: &ModelConfig, seed: u64) -> ModelWeights<f64> {
    let mut w: ModelWeights<f64> = vitprobe::io::init_toy(cfg, seed).cast();
    let mut rng = keyed_rng(seed, "jitter", 0);
    for t in w.tensors_mut() {
        for v in t.data_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += 0.05 * e;
        }
    }
    w
}

pub fn random_images(cfg: &ModelConfig, n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = keyed_rng(seed, "images", 0);
    let len = cfg.image_len();
    let data = (0..n * len).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::new(vec![n, cfg.channels, cfg.image_size, cfg.image_size], data).unwrap()
}

/// Block index a canonical tensor name belongs to; `None` for the embedding,
/// `Some(L)` for the head.
fn stage_of(name: &str, cfg: &ModelConfig) -> Option<usize> {
    if let Some(rest) = name.strip_prefix("blocks.") {
        Some(rest.split('.').next().unwrap().parse().unwrap())
    } else if name.starts_with("head.") {
        Some(cfg.num_blocks)
    } else {
        None
    }
}

/// Central finite differences of the mean cross-entropy for every scalar
/// parameter, returned per named tensor in canonical order.
///
/// A perturbation of block `k` leaves everything before block `k` unchanged,
/// so those evaluations resume from the cached block-`k` input.
pub fn finite_difference_grads(
    images: &Tensor<f64>,
    labels: &[usize],
    w: &ModelWeights<f64>,
    cfg: &ModelConfig,
    step: f64,
) -> Vec<(String, Vec<f64>)> {
    let len = cfg.image_len();
    let n = labels.len();
    let samples: Vec<&[f64]> = images.data().chunks_exact(len).collect();
    let traces: Vec<_> = samples.iter().map(|img| trace_image(img, w, cfg)).collect();
    let stage_input = |s: usize, k: usize| -> Vec<f64> {
        if k < cfg.num_blocks {
            traces[s].blocks[k].input.clone()
        } else {
            traces[s].blocks[k - 1].rc2.clone()
        }
    };

    let names: Vec<String> = w.named_tensors(cfg).into_iter().map(|(n, _)| n).collect();
    names
        .par_iter()
        .enumerate()
        .map(|(ti, name)| {
            let stage = stage_of(name, cfg);
            let cached: Vec<Vec<f64>> = match stage {
                Some(k) => (0..n).map(|s| stage_input(s, k)).collect(),
                None => Vec::new(),
            };
            let loss = |wt: &ModelWeights<f64>| -> f64 {
                let mut total = 0.0;
                for s in 0..n {
                    let logits = match stage {
                        Some(k) => forward_from(&cached[s], k, wt, cfg).unwrap(),
                        None => trace_image(samples[s], wt, cfg).logits,
                    };
                    total += xent_oracle(&logits, labels[s]);
                }
                total / n as f64
            };
            let mut work = w.clone();
            let size = work.tensors()[ti].len();
            let mut g = Vec::with_capacity(size);
            for j in 0..size {
                let orig = work.tensors()[ti].data()[j];
                work.tensors_mut()[ti].data_mut()[j] = orig + step;
                let fp = loss(&work);
                work.tensors_mut()[ti].data_mut()[j] = orig - step;
                let fm = loss(&work);
                work.tensors_mut()[ti].data_mut()[j] = orig;
                g.push((fp - fm) / (2.0 * step));
            }
            (name.clone(), g)
        })
        .collect()
}

/// Worst relative error `|a − n| / max(|a|, |n|)` over entries where either
/// magnitude exceeds `floor`, with the offending index.
pub fn worst_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, usize) {
    let mut worst = (0.0, 0);
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let scale = a.abs().max(n.abs());
        if scale > floor {
            let r = (a - n).abs() / scale;
            if r > worst.0 {
                worst = (r, i);
            }
        }
    }
    worst
}

/// Mean cross-entropy over a batch, recomputed from scratch.
pub fn batch_loss_oracle(
    images: &Tensor<f64>,
    labels: &[usize],
    w: &ModelWeights<f64>,
    cfg: &ModelConfig,
) -> f64 {
    let total: f64 = images
        .data()
        .chunks_exact(cfg.image_len())
        .zip(labels)
        .map(|(img, &y)| xent_oracle(&trace_image(img, w, cfg).logits, y))
        .sum();
    total / labels.len() as f64
}

/// Richardson-extrapolated central difference `(4·D(h/2) − D(h)) / 3` for a
/// single parameter; removes the `O(h²)` truncation term.
pub fn extrapolated_difference(
    images: &Tensor<f64>,
    labels: &[usize],
    w: &ModelWeights<f64>,
    cfg: &ModelConfig,
    tensor: usize,
    entry: usize,
    step: f64,
) -> f64 {
    let mut work = w.clone();
    let orig = work.tensors()[tensor].data()[entry];
    let mut central = |h: f64| {
        work.tensors_mut()[tensor].data_mut()[entry] = orig + h;
        let fp = batch_loss_oracle(images, labels, &work, cfg);
        work.tensors_mut()[tensor].data_mut()[entry] = orig - h;
        let fm = batch_loss_oracle(images, labels, &work, cfg);
        (fp - fm) / (2.0 * h)
    };
    let coarse = central(step);
    let fine = central(step / 2.0);
    (4.0 * fine - coarse) / 3.0
}

pub struct TensorCheck {
    pub name: String,
    pub worst: f64,
    pub worst_index: usize,
    /// Entries over tolerance under the plain central difference:
    /// `(index, analytic, numeric, extrapolated)`.
    pub misses: Vec<(usize, f64, f64, f64)>,
}

impl TensorCheck {
    pub fn worst_extrapolated(&self) -> f64 {
        self.misses
            .iter()
            .map(|&(_, a, _, r)| (a - r).abs() / a.abs().max(r.abs()))
            .fold(0.0, f64::max)
    }
}

/// Compares analytic gradients against central differences tensor by
/// tensor; entries over `tol` are re-estimated by extrapolation.
pub fn check_gradients(
    images: &Tensor<f64>,
    labels: &[usize],
    w: &ModelWeights<f64>,
    cfg: &ModelConfig,
    step: f64,
    floor: f64,
    tol: f64,
) -> Vec<TensorCheck> {
    let (_, grads) = vitprobe::grad::loss_and_grads(images, labels, w, cfg).unwrap();
    let numeric = finite_difference_grads(images, labels, w, cfg, step);
    grads
        .named_tensors(cfg)
        .into_iter()
        .zip(numeric)
        .enumerate()
        .map(|(ti, ((name, a), (name2, n)))| {
            assert_eq!(name, name2);
            let (worst, worst_index) = worst_relative_error(a.data(), &n, floor);
            let misses = a
                .data()
                .iter()
                .zip(&n)
                .enumerate()
                .filter(|&(_, (&av, &nv))| {
                    let scale = av.abs().max(nv.abs());
                    scale > floor && (av - nv).abs() / scale >= tol
                })
                .map(|(j, (&av, &nv))| {
                    let r = extrapolated_difference(images, labels, w, cfg, ti, j, step);
                    (j, av, nv, r)
                })
                .collect();
            TensorCheck {
                name,
                worst,
                worst_index,
                misses,
            }
        })
        .collect()
}

/// Two Gaussian blobs in 2-D, centers at ±(1.5, 1).
pub fn blobs(n: usize, seed: u64, spread: f32) -> (Vec<Vec<f32>>, Vec<usize>) {
    let mut rng = keyed_rng(seed, "blobs", 0);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let y = i % 2;
        let s = if y == 0 { -1.0 } else { 1.0 };
        let a: f32 = rng.sample(StandardNormal);
        let b: f32 = rng.sample(StandardNormal);
        rows.push(vec![s * 1.5 + spread * a, s * 1.0 + spread * b]);
        labels.push(y);
    }
    (rows, labels)
}

/// Searches 7200 directions for a threshold that splits the two classes.
pub fn separable_by_search(rows: &[Vec<f32>], labels: &[usize]) -> bool {
    (0..7200).any(|k| {
        let t = std::f64::consts::PI * k as f64 / 3600.0;
        let (c, s) = (t.cos(), t.sin());
        let proj = |r: &Vec<f32>| r[0] as f64 * c + r[1] as f64 * s;
        let max0 = rows
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == 0)
            .map(|(r, _)| proj(r))
            .fold(f64::NEG_INFINITY, f64::max);
        let min1 = rows
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == 1)
            .map(|(r, _)| proj(r))
            .fold(f64::INFINITY, f64::min);
        max0 < min1
    })
}

pub fn ln_choose(n: u64, k: u64) -> f64 {
    let lg = |m: u64| (1..=m).map(|v| (v as f64).ln()).sum::<f64>();
    lg(n) - lg(k) - lg(n - k)
}

/// `P(X < lo or X > hi)` for `X ~ Binomial(n, p)`.
pub fn binomial_outside(n: u64, p: f64, lo: u64, hi: u64) -> f64 {
    (0..=n)
        .filter(|&k| k < lo || k > hi)
        .map(|k| (ln_choose(n, k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp())
        .sum()
}

/// Accepted objective values never rise beyond the line search's rounding band.
pub fn monotone(history: &[f64]) -> bool {
    history.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs())
}

/// `A = QᵀDQ + δI` with eigenvalues spread over `[0.5, 10]`.
pub fn random_spd(n: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = keyed_rng(seed, "spd", 0);
    let m = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = m.qr().q();
    let d = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.gen_range(0.5..10.0)));
    let a = q.transpose() * d * &q;
    let a = (&a + a.transpose()) * 0.5;
    let b = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
    (a, b)
}
