//! Model-level oracles: stub models with known gradients, softmax checks,
//! finite-difference verification of both gradient paths, and ensemble
//! linearity.

use fia_core::image::ImageBatch;
use fia_core::rng::{normal_f64, uniform_usize, RngSeed};
use fia_core::zoo::layers::{Dense, Layer};
use fia_core::zoo::net::{Network, TapPoint};
use fia_core::zoo::objective::ScalarLoss;
use fia_core::zoo::{arch, ensemble_handle, ModelHandle, ModelOutputs, TrainingMode};
use ndarray::{Array2, Array3, Array4};

fn image_from(vals: Array4<f64>) -> ImageBatch<f64> {
    ImageBatch::from_unclamped(vals, (0.0, 255.0))
}

fn random_image(seed: u64, dim: (usize, usize, usize, usize)) -> ImageBatch<f64> {
    let mut rng = RngSeed(seed).rng();
    let mut data = Array4::zeros(dim);
    data.iter_mut()
        .for_each(|v| *v = fia_core::rng::uniform_f64(&mut rng, 0.0, 255.0));
    image_from(data)
}

/// Stub whose single logit is `Σ weights ⊙ flatten(input)`, with a tap on
/// the raw input.
fn linear_stub(weights: Array2<f64>, num_classes: usize) -> ModelHandle<f64> {
    let input_shape = (2, 2, 2);
    let net = Network::new(
        vec![Layer::Flatten, Layer::Dense(Dense {
            weight: weights,
            bias: ndarray::Array1::zeros(num_classes),
        })],
        input_shape,
        num_classes,
        vec![TapPoint {
            name: "input".into(),
            act_index: 0,
        }],
    )
    .unwrap();
    ModelHandle::from_network("stub", "stub", TrainingMode::Normal, net)
}

#[test]
fn identity_tap_returns_the_input_itself() {
    let model = linear_stub(Array2::ones((1, 8)), 1);
    let img = random_image(1, (1, 2, 2, 2));
    let f = model.features_at(&img, "input").unwrap();
    assert_eq!(&f.values, img.data());
}

#[test]
fn sum_logit_stub_has_all_ones_feature_gradient() {
    let model = linear_stub(Array2::ones((1, 8)), 1);
    let img = random_image(2, (1, 2, 2, 2));
    let g = model.grad_logit_wrt_features(&img, "input", 0).unwrap();
    assert!(g.values.iter().all(|&v| v == 1.0));
}

#[test]
fn single_coordinate_stub_has_spike_gradient() {
    let mut w = Array2::zeros((1, 8));
    w[[0, 0]] = 2.0; // logit = 2 * feature[0, 0, 0] under C-order flatten
    let model = linear_stub(w, 1);
    let img = random_image(3, (1, 2, 2, 2));
    let g = model.grad_logit_wrt_features(&img, "input", 0).unwrap();
    for (i, &v) in g.values.iter().enumerate() {
        assert_eq!(v, if i == 0 { 2.0 } else { 0.0 });
    }
}

#[test]
fn zero_logit_stub_gives_uniform_probabilities() {
    let model = linear_stub(Array2::zeros((4, 8)), 4);
    let img = random_image(4, (1, 2, 2, 2));
    let out = model.forward(&img).unwrap();
    for j in 0..4 {
        assert!((out.probabilities[[0, j]] - 0.25).abs() < 1e-12);
    }
}

#[test]
fn softmax_rows_sum_to_one_for_random_logits() {
    let mut rng = RngSeed(5).rng();
    let mut logits = Array2::zeros((6, 10));
    logits
        .iter_mut()
        .for_each(|v| *v = normal_f64(&mut rng) * 10.0);
    let out = ModelOutputs::from_logits(logits.clone());
    for i in 0..6 {
        let s: f64 = (0..10).map(|j| out.probabilities[[i, j]]).sum();
        assert!((s - 1.0).abs() < 1e-6, "row {i} sums to {s}");
        let mut best = 0;
        for j in 1..10 {
            if logits[[i, j]] > logits[[i, best]] {
                best = j;
            }
        }
        assert_eq!(out.predicted_labels[i], best);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let net = arch::build_network::<f32>("deepnet", (3, 32, 32), 10, RngSeed(6)).unwrap();
    let model = ModelHandle::from_network("deepnet", "d", TrainingMode::Normal, net);
    let img = random_image(7, (2, 3, 32, 32)).cast::<f32>();
    let a = model.forward(&img).unwrap();
    let b = model.forward(&img).unwrap();
    assert_eq!(a.logits, b.logits);
    let fa = model.features_at(&img, "block2").unwrap();
    let fb = model.features_at(&img, "block2").unwrap();
    assert_eq!(fa.values, fb.values);
}

#[test]
fn feature_shapes_match_the_declared_tap_table() {
    for arch_id in arch::ARCH_IDS {
        let net = arch::build_network::<f32>(arch_id, (3, 32, 32), 10, RngSeed(8)).unwrap();
        let model = ModelHandle::from_network(arch_id, arch_id, TrainingMode::Normal, net);
        let img = random_image(9, (1, 3, 32, 32)).cast::<f32>();
        for tap in model.taps().to_vec() {
            let want = model.tap_shape(&tap).unwrap();
            let f = model.features_at(&img, &tap).unwrap();
            let got = f.values.dim();
            assert_eq!((got.1, got.2, got.3), want, "{arch_id}/{tap}");
        }
    }
}

#[test]
fn unknown_tap_is_a_lookup_error() {
    let net = arch::build_network::<f32>("plainnet", (3, 32, 32), 10, RngSeed(10)).unwrap();
    let model = ModelHandle::from_network("plainnet", "p", TrainingMode::Normal, net);
    let img = random_image(11, (1, 3, 32, 32)).cast::<f32>();
    assert!(matches!(
        model.features_at(&img, "blockZ"),
        Err(fia_core::Error::UnknownTap { .. })
    ));
}

/// Central finite differences of the true-class logit w.r.t. feature
/// elements at the tap, against the analytic backward pass.
#[test]
fn feature_gradient_matches_finite_differences_on_real_cnn() {
    for arch_id in ["plainnet", "stridenet"] {
        let net = arch::build_network::<f64>(arch_id, (3, 32, 32), 10, RngSeed(12)).unwrap();
        let model = ModelHandle::from_network(arch_id, arch_id, TrainingMode::Normal, net);
        let img = random_image(13, (1, 3, 32, 32));
        let tap = model.default_tap().to_string();
        let label = 3usize;

        let grad = model.grad_logit_wrt_features(&img, &tap, label).unwrap();
        let f = model.features_at(&img, &tap).unwrap();

        let mut rng = RngSeed(14).rng();
        let dim = f.values.dim();
        let mut checked = 0;
        while checked < 10 {
            let idx = [
                0,
                uniform_usize(&mut rng, dim.1),
                uniform_usize(&mut rng, dim.2),
                uniform_usize(&mut rng, dim.3),
            ];
            let an = grad.values[idx];
            if an.abs() < 1e-8 {
                continue; // relative comparison needs signal
            }
            let h = 1e-4 * f.values[idx].abs().max(1.0);
            let mut fp = f.values.clone();
            fp[idx] += h;
            let mut fm = f.values.clone();
            fm[idx] -= h;
            let lp = model.forward_from_features(&tap, &fp).unwrap()[[0, label]];
            let lm = model.forward_from_features(&tap, &fm).unwrap()[[0, label]];
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()),
                "{arch_id} idx {idx:?}: fd {fd} vs analytic {an}"
            );
            checked += 1;
        }
    }
}

#[test]
fn pixel_sum_and_zero_stub_losses_have_known_gradients() {
    let net = arch::build_network::<f64>("plainnet", (3, 32, 32), 10, RngSeed(15)).unwrap();
    let model = ModelHandle::from_network("plainnet", "p", TrainingMode::Normal, net);
    let img = random_image(16, (1, 3, 32, 32));

    let (v, g) = model
        .grad_scalar_wrt_input(&img, &ScalarLoss::PixelSum)
        .unwrap();
    assert!((v - img.data().iter().sum::<f64>()).abs() < 1e-9);
    assert!(g.iter().all(|&x| x == 1.0));

    let (v, g) = model.grad_scalar_wrt_input(&img, &ScalarLoss::Zero).unwrap();
    assert_eq!(v, 0.0);
    assert!(g.iter().all(|&x| x == 0.0));
}

/// Central finite differences of the importance-weighted feature loss w.r.t.
/// input pixels, against the analytic input gradient.
#[test]
fn weighted_feature_loss_input_gradient_matches_finite_differences() {
    let net = arch::build_network::<f64>("plainnet", (3, 32, 32), 10, RngSeed(17)).unwrap();
    let model = ModelHandle::from_network("plainnet", "p", TrainingMode::Normal, net);
    let img = random_image(18, (1, 3, 32, 32));
    let tap = model.default_tap().to_string();

    let shape = model.tap_shape(&tap).unwrap();
    let mut rng = RngSeed(19).rng();
    let mut delta = Array3::zeros(shape);
    delta.iter_mut().for_each(|v| *v = normal_f64(&mut rng));
    let loss = ScalarLoss::WeightedFeatureSum {
        tap: tap.clone(),
        weights: delta,
        offset: 0.0,
    };

    let (_, grad) = model.grad_scalar_wrt_input(&img, &loss).unwrap();
    let mut checked = 0;
    while checked < 10 {
        let idx = [
            0,
            uniform_usize(&mut rng, 3),
            uniform_usize(&mut rng, 32),
            uniform_usize(&mut rng, 32),
        ];
        let an = grad[idx];
        if an.abs() < 1e-10 {
            continue;
        }
        let h = 1e-3 * 255.0;
        let mut xp = img.data().clone();
        xp[idx] += h;
        let mut xm = img.data().clone();
        xm[idx] -= h;
        let (vp, _) = model
            .grad_scalar_wrt_input(&image_from(xp), &loss)
            .unwrap();
        let (vm, _) = model
            .grad_scalar_wrt_input(&image_from(xm), &loss)
            .unwrap();
        let fd = (vp - vm) / (2.0 * h);
        assert!(
            (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()),
            "idx {idx:?}: fd {fd} vs analytic {an}"
        );
        checked += 1;
    }
}

#[test]
fn single_member_ensemble_behaves_like_the_member() {
    let net = arch::build_network::<f32>("widenet", (3, 32, 32), 10, RngSeed(20)).unwrap();
    let member = ModelHandle::from_network("widenet", "w", TrainingMode::Normal, net);
    let ens = ensemble_handle(vec![member.clone()], vec![1.0]).unwrap();
    let img = random_image(21, (1, 3, 32, 32)).cast::<f32>();
    assert_eq!(
        ens.forward(&img).unwrap().logits,
        member.forward(&img).unwrap().logits
    );
    assert_eq!(ens.taps()[0], "m0/block1");
}

#[test]
fn half_half_identical_members_equal_one_member() {
    let net = arch::build_network::<f32>("plainnet", (3, 32, 32), 10, RngSeed(22)).unwrap();
    let member = ModelHandle::from_network("plainnet", "p", TrainingMode::Normal, net);
    let ens = ensemble_handle(vec![member.clone(), member.clone()], vec![0.5, 0.5]).unwrap();
    let img = random_image(23, (1, 3, 32, 32)).cast::<f32>();
    let a = ens.forward(&img).unwrap().logits;
    let b = member.forward(&img).unwrap().logits;
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn ensemble_logits_match_weighted_sum_oracle() {
    let members: Vec<ModelHandle<f64>> = [30u64, 31, 32]
        .iter()
        .map(|&s| {
            let mut rng = RngSeed(s).rng();
            let mut w = Array2::zeros((4, 8));
            w.iter_mut().for_each(|v| *v = normal_f64(&mut rng));
            linear_stub(w, 4)
        })
        .collect();
    let weights = vec![0.2, 0.3, 0.5];
    let ens = ensemble_handle(members.clone(), weights.clone()).unwrap();
    let img = random_image(33, (1, 2, 2, 2));
    let fused = ens.forward(&img).unwrap().logits;
    for j in 0..4 {
        let mut expect = 0.0;
        for (m, &w) in members.iter().zip(&weights) {
            expect += w * m.forward(&img).unwrap().logits[[0, j]];
        }
        assert!(
            (fused[[0, j]] - expect).abs() < 1e-5,
            "logit {j}: {} vs {expect}",
            fused[[0, j]]
        );
    }
}

#[test]
fn ensemble_member_tap_gradient_scales_with_weight() {
    let net = arch::build_network::<f64>("plainnet", (3, 32, 32), 10, RngSeed(34)).unwrap();
    let member = ModelHandle::from_network("plainnet", "p", TrainingMode::Normal, net.clone());
    let other = ModelHandle::from_network(
        "plainnet",
        "q",
        TrainingMode::Normal,
        arch::build_network::<f64>("plainnet", (3, 32, 32), 10, RngSeed(35)).unwrap(),
    );
    let ens = ensemble_handle(vec![member.clone(), other], vec![0.25, 0.75]).unwrap();
    let img = random_image(36, (1, 3, 32, 32));
    let ge = ens
        .grad_logit_wrt_features(&img, "m0/block2", 1)
        .unwrap();
    let gm = member.grad_logit_wrt_features(&img, "block2", 1).unwrap();
    for (a, b) in ge.values.iter().zip(gm.values.iter()) {
        assert!((a - 0.25 * b).abs() < 1e-9);
    }
}

#[test]
fn class_count_mismatch_is_rejected() {
    let a = linear_stub(Array2::ones((2, 8)), 2);
    let b = linear_stub(Array2::ones((3, 8)), 3);
    assert!(ensemble_handle(vec![a, b], vec![0.5, 0.5]).is_err());
}

#[test]
fn ensemble_weights_must_sum_to_one() {
    let a = linear_stub(Array2::ones((2, 8)), 2);
    let b = linear_stub(Array2::ones((2, 8)), 2);
    assert!(ensemble_handle(vec![a, b], vec![0.5, 0.6]).is_err());
}
