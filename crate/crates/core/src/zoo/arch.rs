//! Desk-scale CNN architectures.
//!
//! Four deliberately dissimilar families (kernel size, pooling style, depth,
//! stride, activation) so cross-architecture transfer is a real test. Each
//! publishes an ordered tap list `block1..blockB` at its block outputs.

use ndarray::{Array1, Array2, Array4};

use super::layers::{Conv2d, Dense, Layer};
use super::net::{Network, TapPoint};
use crate::error::{Error, Result};
use crate::rng::{normal_f64, RngSeed, RunRng};
use crate::scalar::Scalar;

/// All architecture identifiers, in zoo order.
pub const ARCH_IDS: [&str; 4] = ["plainnet", "widenet", "deepnet", "stridenet"];

/// Pixel inputs are mapped to roughly `[-0.5, 0.5]` by a fixed head layer,
/// so input gradients stay expressed in pixel units.
fn normalize_layer<F: Scalar>() -> Layer<F> {
    Layer::Normalize {
        scale: F::from_f64_lossy(1.0 / 255.0),
        shift: F::from_f64_lossy(-0.5),
    }
}

fn kaiming_conv<F: Scalar>(
    rng: &mut RunRng,
    cout: usize,
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Layer<F> {
    let fan_in = (cin * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    let mut weight = Array4::zeros((cout, cin, k, k));
    weight
        .iter_mut()
        .for_each(|v| *v = F::from_f64_lossy(normal_f64(rng) * std));
    Layer::Conv(Conv2d {
        weight,
        bias: Array1::zeros(cout),
        stride,
        pad,
    })
}

fn kaiming_dense<F: Scalar>(rng: &mut RunRng, out: usize, inp: usize) -> Layer<F> {
    let std = (2.0 / inp as f64).sqrt();
    let mut weight = Array2::zeros((out, inp));
    weight
        .iter_mut()
        .for_each(|v| *v = F::from_f64_lossy(normal_f64(rng) * std));
    Layer::Dense(Dense {
        weight,
        bias: Array1::zeros(out),
    })
}

/// Builds a freshly initialized network for `arch_id`. Initialization draws
/// from a stream seeded only by `seed`, so identical seeds give identical
/// parameters.
pub fn build_network<F: Scalar>(
    arch_id: &str,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    seed: RngSeed,
) -> Result<Network<F>> {
    let mut rng = seed.rng();
    let (c0, _, _) = input_shape;
    let mut layers: Vec<Layer<F>> = vec![normalize_layer()];
    let mut taps: Vec<TapPoint> = Vec::new();
    let tap_after = |layers: &Vec<Layer<F>>, taps: &mut Vec<TapPoint>| {
        taps.push(TapPoint {
            name: format!("block{}", taps.len() + 1),
            act_index: layers.len(),
        });
    };

    match arch_id {
        "plainnet" => {
            layers.push(kaiming_conv(&mut rng, 24, c0, 3, 1, 1));
            layers.push(Layer::Relu);
            tap_after(&layers, &mut taps);
            layers.push(Layer::MaxPool2);
            layers.push(kaiming_conv(&mut rng, 48, 24, 3, 1, 1));
            layers.push(Layer::Relu);
            tap_after(&layers, &mut taps);
            layers.push(Layer::MaxPool2);
            layers.push(kaiming_conv(&mut rng, 64, 48, 3, 1, 1));
            layers.push(Layer::Relu);
            tap_after(&layers, &mut taps);
            layers.push(Layer::GlobalAvgPool);
            layers.push(Layer::Flatten);
            layers.push(kaiming_dense(&mut rng, num_classes, 64));
        }
        "widenet" => {
            layers.push(kaiming_conv(&mut rng, 28, c0, 5, 1, 2));
            layers.push(Layer::Relu);
            tap_after(&layers, &mut taps);
            layers.push(Layer::AvgPool2);
            layers.push(kaiming_conv(&mut rng, 44, 28, 5, 1, 2));
            layers.push(Layer::Relu);
            tap_after(&layers, &mut taps);
            layers.push(Layer::AvgPool2);
            layers.push(kaiming_conv(&mut rng, 64, 44, 3, 1, 1));
            layers.push(Layer::Relu);
            tap_after(&layers, &mut taps);
            layers.push(Layer::GlobalAvgPool);
            layers.push(Layer::Flatten);
            layers.push(kaiming_dense(&mut rng, num_classes, 64));
        }
        "deepnet" => {
            layers.push(kaiming_conv(&mut rng, 16, c0, 3, 1, 1));
            layers.push(Layer::LeakyRelu(F::from_f64_lossy(0.1)));
            tap_after(&layers, &mut taps);
            layers.push(kaiming_conv(&mut rng, 28, 16, 3, 1, 1));
            layers.push(Layer::LeakyRelu(F::from_f64_lossy(0.1)));
            tap_after(&layers, &mut taps);
            layers.push(Layer::MaxPool2);
            layers.push(kaiming_conv(&mut rng, 40, 28, 3, 1, 1));
            layers.push(Layer::LeakyRelu(F::from_f64_lossy(0.1)));
            tap_after(&layers, &mut taps);
            layers.push(kaiming_conv(&mut rng, 52, 40, 3, 1, 1));
            layers.push(Layer::LeakyRelu(F::from_f64_lossy(0.1)));
            tap_after(&layers, &mut taps);
            layers.push(Layer::MaxPool2);
            layers.push(Layer::GlobalAvgPool);
            layers.push(Layer::Flatten);
            layers.push(kaiming_dense(&mut rng, num_classes, 52));
        }
        "stridenet" => {
            layers.push(kaiming_conv(&mut rng, 28, c0, 5, 2, 2));
            layers.push(Layer::Relu);
            tap_after(&layers, &mut taps);
            layers.push(kaiming_conv(&mut rng, 52, 28, 3, 2, 1));
            layers.push(Layer::Relu);
            tap_after(&layers, &mut taps);
            layers.push(kaiming_conv(&mut rng, 72, 52, 3, 1, 1));
            layers.push(Layer::Relu);
            tap_after(&layers, &mut taps);
            layers.push(Layer::GlobalAvgPool);
            layers.push(Layer::Flatten);
            layers.push(kaiming_dense(&mut rng, num_classes, 72));
        }
        other => {
            return Err(Error::Lookup(format!("unknown architecture `{other}`")));
        }
    }

    Network::new(layers, input_shape, num_classes, taps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_architectures_build_and_declare_taps() {
        for arch in ARCH_IDS {
            let net = build_network::<f32>(arch, (3, 32, 32), 10, RngSeed(1)).unwrap();
            assert!(!net.tap_names().is_empty(), "{arch} has taps");
            for tap in net.tap_names() {
                assert!(net.tap_shape(&tap).is_some());
            }
        }
    }

    #[test]
    fn identical_seed_identical_parameters() {
        let a = build_network::<f32>("plainnet", (3, 32, 32), 10, RngSeed(9)).unwrap();
        let b = build_network::<f32>("plainnet", (3, 32, 32), 10, RngSeed(9)).unwrap();
        assert_eq!(a.export_params(), b.export_params());
        let c = build_network::<f32>("plainnet", (3, 32, 32), 10, RngSeed(10)).unwrap();
        assert_ne!(a.export_params(), c.export_params());
    }

    #[test]
    fn declared_tap_shapes_match_a_forward_pass() {
        for arch in ARCH_IDS {
            let net = build_network::<f32>(arch, (3, 32, 32), 10, RngSeed(2)).unwrap();
            let x = ndarray::Array4::<f32>::zeros((1, 3, 32, 32));
            for tap in net.tap_names() {
                let idx = net.tap_act_index(&tap).unwrap();
                let acts = net.forward_to(&x, idx);
                let got = acts.last().unwrap().dim();
                let want = net.tap_shape(&tap).unwrap();
                assert_eq!((got.1, got.2, got.3), want, "{arch}/{tap}");
            }
        }
    }
}
