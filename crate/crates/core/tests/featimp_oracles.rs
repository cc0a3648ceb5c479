//! Aggregation oracles: explicit-enumeration equivalence, the reduction
//! identity at zero drop probability, scale invariance, and reproducibility.

use fia_core::featimp::{aggregate_gradient, apply_mask, raw_gradient, sample_mask, AggregationConfig};
use fia_core::image::{ImageBatch, LabelledExample};
use fia_core::rng::RngSeed;
use fia_core::zoo::layers::Layer;
use fia_core::zoo::{arch, ModelHandle, TrainingMode};
use ndarray::{Array3, Array4};

fn small_cnn(seed: u64) -> ModelHandle<f32> {
    let net = arch::build_network::<f32>("plainnet", (3, 32, 32), 10, RngSeed(seed)).unwrap();
    ModelHandle::from_network("plainnet", "p", TrainingMode::Normal, net)
}

fn random_example(seed: u64, label: usize) -> LabelledExample<f32> {
    let mut rng = RngSeed(seed).rng();
    let mut data = Array4::zeros((1, 3, 32, 32));
    data.iter_mut()
        .for_each(|v| *v = fia_core::rng::uniform_f64(&mut rng, 0.0, 255.0) as f32);
    LabelledExample::new(ImageBatch::new_default_range(data).unwrap(), label).unwrap()
}

/// Independent oracle: draws the same masks from a twin stream, computes the
/// per-mask gradients one by one, sums in f64, and ℓ2-normalizes in f64.
fn enumeration_oracle(
    model: &ModelHandle<f32>,
    example: &LabelledExample<f32>,
    cfg: &AggregationConfig,
    seed: RngSeed,
) -> Array3<f64> {
    let mut rng = seed.rng();
    let shape = example.image.image_shape();
    let mut sum: Option<Array3<f64>> = None;
    for _ in 0..cfg.ensemble_number {
        let mask = sample_mask::<f32>(shape, cfg.drop_prob, cfg.per_element_mask, &mut rng)
            .unwrap();
        let masked = apply_mask(&example.image, &mask);
        let grad = model
            .grad_logit_wrt_features(&masked, &cfg.tap, example.label)
            .unwrap();
        let (_, c, h, w) = grad.values.dim();
        let mut g64 = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    g64[[ci, y, x]] = grad.values[[0, ci, y, x]] as f64;
                }
            }
        }
        sum = Some(match sum {
            None => g64,
            Some(acc) => acc + g64,
        });
    }
    let sum = sum.unwrap();
    let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    sum.mapv(|v| v / norm)
}

#[test]
fn aggregate_matches_explicit_enumeration_oracle() {
    let model = small_cnn(1);
    for (case, (img_seed, run_seed, p_d, n)) in [
        (10u64, 20u64, 0.3, 8usize),
        (11, 21, 0.1, 4),
        (12, 22, 0.3, 1),
    ]
    .into_iter()
    .enumerate()
    {
        let example = random_example(img_seed, (img_seed % 10) as usize);
        let cfg = AggregationConfig::new(p_d, n, "block2").unwrap();
        let mut rng = RngSeed(run_seed).rng();
        let agg = aggregate_gradient(&model, &example, &cfg, &mut rng).unwrap();
        let oracle = enumeration_oracle(&model, &example, &cfg, RngSeed(run_seed));
        let mut max_diff = 0.0f64;
        for (a, b) in agg.values.iter().zip(oracle.iter()) {
            max_diff = max_diff.max((*a as f64 - b).abs());
        }
        assert!(max_diff <= 1e-5, "case {case}: max diff {max_diff}");
    }
}

#[test]
fn zero_drop_prob_reduces_to_normalized_raw_gradient() {
    let model = small_cnn(2);
    let example = random_example(13, 4);
    let raw = raw_gradient(&model, &example, "block2").unwrap();
    let (_, c, h, w) = raw.values.dim();
    let norm = raw.values.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();

    for n in [1usize, 5] {
        let cfg = AggregationConfig::new(0.0, n, "block2").unwrap();
        let mut rng = RngSeed(99).rng();
        let agg = aggregate_gradient(&model, &example, &cfg, &mut rng).unwrap();
        assert_eq!(agg.values.dim(), (c, h, w));
        let mut max_diff = 0.0f64;
        for (a, r) in agg.values.iter().zip(raw.values.iter()) {
            max_diff = max_diff.max((*a as f64 - *r as f64 / norm).abs());
        }
        assert!(max_diff <= 1e-6, "N={n}: diff {max_diff}");
    }
}

#[test]
fn aggregate_is_invariant_to_positive_logit_rescaling() {
    let model = small_cnn(3);
    let mut scaled = model.clone();
    {
        let net = scaled.network().unwrap().clone();
        let mut net = net;
        for layer in net.layers_mut().iter_mut().rev() {
            if let Layer::Dense(d) = layer {
                d.weight.mapv_inplace(|v| v * 3.0);
                d.bias.mapv_inplace(|v| v * 3.0);
                break;
            }
        }
        scaled = ModelHandle::from_network("plainnet", "p3", TrainingMode::Normal, net);
    }
    let example = random_example(14, 7);
    let cfg = AggregationConfig::new(0.3, 6, "block2").unwrap();
    let mut rng_a = RngSeed(55).rng();
    let mut rng_b = RngSeed(55).rng();
    let a = aggregate_gradient(&model, &example, &cfg, &mut rng_a).unwrap();
    let b = aggregate_gradient(&scaled, &example, &cfg, &mut rng_b).unwrap();
    for (x, y) in a.values.iter().zip(b.values.iter()) {
        assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
    }
}

#[test]
fn identical_seed_identical_aggregate() {
    let model = small_cnn(4);
    let example = random_example(15, 2);
    let cfg = AggregationConfig::new(0.3, 5, "block1").unwrap();
    let mut rng_a = RngSeed(77).rng();
    let mut rng_b = RngSeed(77).rng();
    let a = aggregate_gradient(&model, &example, &cfg, &mut rng_a).unwrap();
    let b = aggregate_gradient(&model, &example, &cfg, &mut rng_b).unwrap();
    assert_eq!(a.values, b.values);
}

#[test]
fn aggregate_is_unit_norm() {
    let model = small_cnn(5);
    let example = random_example(16, 9);
    let cfg = AggregationConfig::new(0.2, 4, "block3").unwrap();
    let mut rng = RngSeed(88).rng();
    let agg = aggregate_gradient(&model, &example, &cfg, &mut rng).unwrap();
    let norm = agg.values.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() <= 1e-5, "norm {norm}");
}

#[test]
fn zero_head_model_degenerates() {
    let mut net = arch::build_network::<f32>("plainnet", (3, 32, 32), 10, RngSeed(6)).unwrap();
    for layer in net.layers_mut().iter_mut() {
        if let Layer::Dense(d) = layer {
            d.weight.fill(0.0);
            d.bias.fill(0.0);
        }
    }
    let model = ModelHandle::from_network("plainnet", "zero", TrainingMode::Normal, net);
    let example = random_example(17, 0);
    let cfg = AggregationConfig::new(0.3, 2, "block2").unwrap();
    let mut rng = RngSeed(1).rng();
    assert!(matches!(
        aggregate_gradient(&model, &example, &cfg, &mut rng),
        Err(fia_core::Error::DegenerateGradient)
    ));
}
