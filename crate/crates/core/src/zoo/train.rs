//! Deterministic training for the desk-scale zoo.
//!
//! Plain SGD with momentum on softmax cross-entropy, light shift/noise
//! augmentation, and an optional adversarial mode that replaces part of each
//! batch with momentum-sign adversarial examples crafted on the live model.
//! Every random draw flows from the training seed, so a seed pins the final
//! checkpoint bit-for-bit.

use ndarray::{Array2, Array4, Axis};

use super::arch;
use super::dataset::{Dataset, Split};
use super::layers::{Layer, LayerGrads};
use super::net::Network;
use super::{ModelHandle, TrainingMode};
use crate::error::{Error, Result};
use crate::rng::{normal_f64, uniform_usize, RngSeed, RunRng};
use crate::scalar::Scalar;

/// Hyperparameters for one training run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Max augmentation shift in pixels (uniform in `[-s, s]` per axis).
    pub shift_aug: usize,
    /// Stddev of additive pixel noise augmentation.
    pub noise_aug_sigma: f64,
    /// Minimum clean test accuracy a checkpoint must reach.
    pub accuracy_floor: f64,
    /// Adversarial-mode budget (pixel units).
    pub adv_epsilon: f64,
    /// Adversarial-mode attack iterations.
    pub adv_steps: usize,
    /// Fraction of each batch replaced by adversarial examples.
    pub adv_fraction: f64,
    /// Clean epochs before adversarial examples are mixed in; mixing from a
    /// random-init model diverges.
    pub adv_warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 14,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            shift_aug: 0,
            noise_aug_sigma: 0.0,
            accuracy_floor: 0.80,
            adv_epsilon: 8.0,
            adv_steps: 5,
            adv_fraction: 0.5,
            adv_warmup_epochs: 4,
        }
    }
}

/// Trains one architecture on the dataset and returns a handle whose
/// `params_id` is `{arch}-{mode}-s{seed}`.
pub fn train_model<F: Scalar>(
    arch_id: &str,
    dataset: &Dataset,
    mode: TrainingMode,
    seed: RngSeed,
    cfg: &TrainConfig,
) -> Result<ModelHandle<F>> {
    let num_classes = dataset.meta.num_classes;
    let input_shape = (
        dataset.meta.image_shape[0],
        dataset.meta.image_shape[1],
        dataset.meta.image_shape[2],
    );
    let mode_str = mode.to_string();
    let mut net: Network<F> = arch::build_network(
        arch_id,
        input_shape,
        num_classes,
        seed.derive(&["init", arch_id, &mode_str]),
    )?;

    let mut velocity = net.zero_grads();
    let mut shuffle_rng = seed.derive(&["shuffle", arch_id, &mode_str]).rng();
    let mut aug_rng = seed.derive(&["augment", arch_id, &mode_str]).rng();

    let n_train = dataset.len(Split::Train);
    let mut order: Vec<usize> = (0..n_train).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate * lr_decay(epoch, cfg.epochs);
        // In-place Fisher–Yates, one fresh permutation per epoch.
        for i in 0..n_train.saturating_sub(1) {
            let j = i + uniform_usize(&mut shuffle_rng, n_train - i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = dataset.batch::<F>(Split::Train, chunk);
            let mut x = batch.data().clone();
            augment(&mut x, cfg, &mut aug_rng);
            if mode == TrainingMode::Adversarial && epoch >= cfg.adv_warmup_epochs {
                let k = ((chunk.len() as f64) * cfg.adv_fraction).ceil() as usize;
                if k > 0 {
                    mim_ascent_batch(
                        &net,
                        &mut x,
                        &labels,
                        k,
                        F::from_f64_lossy(cfg.adv_epsilon),
                        cfg.adv_steps,
                    );
                }
            }
            sgd_step(&mut net, &mut velocity, &x, &labels, lr, cfg);
        }
    }

    let accuracy = evaluate_accuracy(&net, dataset, Split::Test, 256);
    if accuracy < cfg.accuracy_floor {
        return Err(Error::TrainingFailed {
            arch: arch_id.to_string(),
            mode: mode_str,
            accuracy,
            floor: cfg.accuracy_floor,
        });
    }

    let params_id = format!("{arch_id}-{mode_str}-s{}", seed.0);
    let mut handle = ModelHandle::from_network(arch_id, params_id, mode, net);
    handle.set_clean_accuracy(accuracy);
    Ok(handle)
}

fn lr_decay(epoch: usize, total: usize) -> f64 {
    let frac = (epoch as f64 + 0.5) / total as f64;
    if frac < 0.6 {
        1.0
    } else if frac < 0.85 {
        0.3
    } else {
        0.1
    }
}

/// Per-image shift (zero fill) and additive pixel noise, clamped to range.
fn augment<F: Scalar>(x: &mut Array4<F>, cfg: &TrainConfig, rng: &mut RunRng) {
    let (n, c, h, w) = x.dim();
    let s = cfg.shift_aug;
    let hi = F::from_f64_lossy(255.0);
    for ni in 0..n {
        if s > 0 {
            let dx = uniform_usize(rng, 2 * s + 1) as isize - s as isize;
            let dy = uniform_usize(rng, 2 * s + 1) as isize - s as isize;
            if dx != 0 || dy != 0 {
                let src = x.index_axis(Axis(0), ni).to_owned();
                let mut dst = x.index_axis_mut(Axis(0), ni);
                dst.fill(F::zero());
                for ci in 0..c {
                    for y in 0..h {
                        let sy = y as isize - dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize - dx;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            dst[[ci, y, xx]] = src[[ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
        if cfg.noise_aug_sigma > 0.0 {
            let mut img = x.index_axis_mut(Axis(0), ni);
            for v in img.iter_mut() {
                let noisy =
                    *v + F::from_f64_lossy(normal_f64(rng) * cfg.noise_aug_sigma);
                *v = num_traits::clamp(noisy, F::zero(), hi);
            }
        }
    }
}

/// Batched softmax cross-entropy: returns mean loss and d(mean CE)/dlogits.
fn batch_ce<F: Scalar>(logits: &Array2<F>, labels: &[usize], scale: F) -> (F, Array2<F>) {
    let (n, k) = logits.dim();
    let mut dlogits = Array2::zeros((n, k));
    let mut total = F::zero();
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for j in 0..k {
            sum += (row[j] - max).exp();
        }
        total += max + sum.ln() - row[labels[i]];
        for j in 0..k {
            let p = (row[j] - max).exp() / sum;
            let t = if j == labels[i] { F::one() } else { F::zero() };
            dlogits[[i, j]] = (p - t) * scale;
        }
    }
    (total / F::from_f64_lossy(n as f64), dlogits)
}

fn sgd_step<F: Scalar>(
    net: &mut Network<F>,
    velocity: &mut Vec<LayerGrads<F>>,
    x: &Array4<F>,
    labels: &[usize],
    lr: f64,
    cfg: &TrainConfig,
) {
    let n = x.dim().0;
    let acts = net.forward_trace(x);
    let logits = net.logits(&acts);
    let (_, dlogits) = batch_ce(&logits, labels, F::from_f64_lossy(1.0 / n as f64));
    let seed = net.seed_from_logit_grad(&dlogits);
    let mut grads = net.zero_grads();
    net.backward(&acts, acts.len() - 1, seed, 0, Some(&mut grads));

    let lr = F::from_f64_lossy(lr);
    let mu = F::from_f64_lossy(cfg.momentum);
    let wd = F::from_f64_lossy(cfg.weight_decay);
    for (li, layer) in net.layers_mut().iter_mut().enumerate() {
        match (layer, &mut grads[li], &mut velocity[li]) {
            (
                Layer::Conv(conv),
                LayerGrads::Conv { dw, db },
                LayerGrads::Conv { dw: vw, db: vb },
            ) => {
                ndarray::Zip::from(&mut *vw)
                    .and(&*dw)
                    .and(&conv.weight)
                    .for_each(|v, &g, &w| *v = *v * mu + g + w * wd);
                conv.weight
                    .iter_mut()
                    .zip(vw.iter())
                    .for_each(|(w, &v)| *w -= lr * v);
                ndarray::Zip::from(&mut *vb).and(&*db).for_each(|v, &g| *v = *v * mu + g);
                conv.bias
                    .iter_mut()
                    .zip(vb.iter())
                    .for_each(|(b, &v)| *b -= lr * v);
            }
            (
                Layer::Dense(dense),
                LayerGrads::Dense { dw, db },
                LayerGrads::Dense { dw: vw, db: vb },
            ) => {
                ndarray::Zip::from(&mut *vw)
                    .and(&*dw)
                    .and(&dense.weight)
                    .for_each(|v, &g, &w| *v = *v * mu + g + w * wd);
                dense
                    .weight
                    .iter_mut()
                    .zip(vw.iter())
                    .for_each(|(w, &v)| *w -= lr * v);
                ndarray::Zip::from(&mut *vb).and(&*db).for_each(|v, &g| *v = *v * mu + g);
                dense
                    .bias
                    .iter_mut()
                    .zip(vb.iter())
                    .for_each(|(b, &v)| *b -= lr * v);
            }
            _ => {}
        }
    }
}

/// Batched momentum-sign ascent on cross-entropy over the first `k` images:
/// the training-time stand-in that mirrors the attack module's momentum
/// method (`g ← g + ∇J/‖∇J‖₁`, `x ← clip(x + α·sign(g))`).
pub(crate) fn mim_ascent_batch<F: Scalar>(
    net: &Network<F>,
    x: &mut Array4<F>,
    labels: &[usize],
    k: usize,
    epsilon: F,
    steps: usize,
) {
    if steps == 0 || k == 0 {
        return;
    }
    let (_, c, h, w) = x.dim();
    let clean = x.slice(ndarray::s![..k, .., .., ..]).to_owned();
    let mut adv = clean.clone();
    let mut g: Array4<F> = Array4::zeros(adv.dim());
    let alpha = epsilon / F::from_f64_lossy(steps as f64);
    let hi = F::from_f64_lossy(255.0);

    for _ in 0..steps {
        let acts = net.forward_trace(&adv);
        let logits = net.logits(&acts);
        let (_, dlogits) = batch_ce(&logits, &labels[..k], F::one());
        let seed = net.seed_from_logit_grad(&dlogits);
        let gx = net.backward(&acts, acts.len() - 1, seed, 0, None);
        for i in 0..k {
            let gi = gx.index_axis(Axis(0), i);
            let l1: F = gi.iter().map(|v| v.abs()).sum();
            if l1 == F::zero() {
                continue;
            }
            let mut gacc = g.index_axis_mut(Axis(0), i);
            ndarray::Zip::from(&mut gacc).and(&gi).for_each(|a, &v| *a += v / l1);
        }
        for i in 0..k {
            let gacc = g.index_axis(Axis(0), i);
            let cl = clean.index_axis(Axis(0), i);
            let mut ai = adv.index_axis_mut(Axis(0), i);
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let step = alpha * sign(gacc[[ci, y, xx]]);
                        let v = ai[[ci, y, xx]] + step;
                        let cv = cl[[ci, y, xx]];
                        let v = num_traits::clamp(v, cv - epsilon, cv + epsilon);
                        ai[[ci, y, xx]] = num_traits::clamp(v, F::zero(), hi);
                    }
                }
            }
        }
    }
    x.slice_mut(ndarray::s![..k, .., .., ..]).assign(&adv);
}

fn sign<F: Scalar>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// Test hook exposing the trainer's batched momentum ascent so its
/// equivalence with the attack module's momentum method can be asserted.
pub fn mim_ascent_for_tests<F: Scalar>(
    net: &Network<F>,
    x: &mut Array4<F>,
    labels: &[usize],
    k: usize,
    epsilon: f64,
    steps: usize,
) {
    mim_ascent_batch(net, x, labels, k, F::from_f64_lossy(epsilon), steps);
}

/// Clean accuracy of a network over one split.
pub fn evaluate_accuracy<F: Scalar>(
    net: &Network<F>,
    dataset: &Dataset,
    split: Split,
    batch: usize,
) -> f64 {
    let n = dataset.len(split);
    let mut correct = 0usize;
    let mut idx = 0;
    while idx < n {
        let take: Vec<usize> = (idx..(idx + batch).min(n)).collect();
        let (images, labels) = dataset.batch::<F>(split, &take);
        let acts = net.forward_trace(images.data());
        let logits = net.logits(&acts);
        for (i, &label) in labels.iter().enumerate() {
            let row = logits.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        idx += batch;
    }
    correct as f64 / n as f64
}

/// Clean accuracy of a handle (ensembles included) over one split.
pub fn handle_accuracy<F: Scalar>(
    handle: &ModelHandle<F>,
    dataset: &Dataset,
    split: Split,
    batch: usize,
) -> Result<f64> {
    let n = dataset.len(split);
    let mut correct = 0usize;
    let mut idx = 0;
    while idx < n {
        let take: Vec<usize> = (idx..(idx + batch).min(n)).collect();
        let (images, labels) = dataset.batch::<F>(split, &take);
        let out = handle.forward(&images)?;
        correct += out
            .predicted_labels
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
        idx += batch;
    }
    Ok(correct as f64 / n as f64)
}
