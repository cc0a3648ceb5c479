//! Sequential network with named feature taps and trace-based backprop.

use ndarray::{Array2, Array4};

use super::layers::{Layer, LayerGrads};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A named tap: `act_index` points into the activation trace
/// (0 = network input, i + 1 = output of layer i).
#[derive(Debug, Clone)]
pub struct TapPoint {
    pub name: String,
    pub act_index: usize,
}

/// Feed-forward classifier with an ordered list of feature taps.
#[derive(Debug, Clone)]
pub struct Network<F: Scalar> {
    layers: Vec<Layer<F>>,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    taps: Vec<TapPoint>,
}

impl<F: Scalar> Network<F> {
    pub fn new(
        layers: Vec<Layer<F>>,
        input_shape: (usize, usize, usize),
        num_classes: usize,
        taps: Vec<TapPoint>,
    ) -> Result<Self> {
        let mut shape = input_shape;
        for layer in &layers {
            shape = layer.out_shape(shape);
        }
        if shape != (num_classes, 1, 1) {
            return Err(Error::Contract(format!(
                "network head produces {shape:?}, expected ({num_classes}, 1, 1)"
            )));
        }
        for tap in &taps {
            if tap.act_index > layers.len() {
                return Err(Error::Contract(format!(
                    "tap `{}` points past the last activation",
                    tap.name
                )));
            }
        }
        Ok(Self {
            layers,
            input_shape,
            num_classes,
            taps,
        })
    }

    pub fn layers(&self) -> &[Layer<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<F>] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn tap_names(&self) -> Vec<String> {
        self.taps.iter().map(|t| t.name.clone()).collect()
    }

    pub fn tap_act_index(&self, tap: &str) -> Option<usize> {
        self.taps
            .iter()
            .find(|t| t.name == tap)
            .map(|t| t.act_index)
    }

    /// Shape of a tap's activation `(c, h, w)`, derived analytically from the
    /// layer stack (no forward pass).
    pub fn tap_shape(&self, tap: &str) -> Option<(usize, usize, usize)> {
        let idx = self.tap_act_index(tap)?;
        let mut shape = self.input_shape;
        for layer in &self.layers[..idx] {
            shape = layer.out_shape(shape);
        }
        Some(shape)
    }

    /// Runs the full forward pass, returning every activation
    /// (`acts[0]` is the input, `acts[i + 1]` the output of layer `i`).
    pub fn forward_trace(&self, x: &Array4<F>) -> Vec<Array4<F>> {
        self.forward_to(x, self.layers.len())
    }

    /// Runs the forward pass up to activation index `act_index` inclusive.
    pub fn forward_to(&self, x: &Array4<F>, act_index: usize) -> Vec<Array4<F>> {
        let mut acts = Vec::with_capacity(act_index + 1);
        acts.push(x.clone());
        for layer in &self.layers[..act_index] {
            let next = layer.forward(acts.last().unwrap());
            acts.push(next);
        }
        acts
    }

    /// Continues the forward pass from a replacement activation at
    /// `act_index`, returning the logits. Used by feature-space probes.
    pub fn forward_from(&self, act_index: usize, activation: &Array4<F>) -> Array2<F> {
        let mut cur = activation.clone();
        for layer in &self.layers[act_index..] {
            cur = layer.forward(&cur);
        }
        let (n, k, _, _) = cur.dim();
        cur.into_shape_with_order((n, k)).expect("logit reshape")
    }

    /// Logits from a completed trace.
    pub fn logits(&self, acts: &[Array4<F>]) -> Array2<F> {
        let last = acts.last().expect("nonempty trace");
        let (n, k, _, _) = last.dim();
        last.clone()
            .into_shape_with_order((n, k))
            .expect("logit reshape")
    }

    /// Propagates `seed` (gradient at `acts[from]`) back to `acts[to]`,
    /// optionally accumulating parameter gradients for the traversed layers.
    pub fn backward(
        &self,
        acts: &[Array4<F>],
        from: usize,
        seed: Array4<F>,
        to: usize,
        mut grads: Option<&mut Vec<LayerGrads<F>>>,
    ) -> Array4<F> {
        debug_assert!(from >= to && from < acts.len());
        let mut grad = seed;
        for li in (to..from).rev() {
            let layer_grads = grads.as_mut().map(|g| &mut g[li]);
            grad = self.layers[li].backward(&acts[li], &grad, layer_grads);
        }
        grad
    }

    /// Gradient seed at the logits, reshaped into trace layout.
    pub fn seed_from_logit_grad(&self, dlogits: &Array2<F>) -> Array4<F> {
        let (n, k) = dlogits.dim();
        dlogits
            .clone()
            .into_shape_with_order((n, k, 1, 1))
            .expect("logit seed reshape")
    }

    /// Fresh zeroed parameter-gradient buffers, parallel to the layer list.
    pub fn zero_grads(&self) -> Vec<LayerGrads<F>> {
        self.layers.iter().map(|l| l.zero_grads()).collect()
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Flat parameter vector in layer order.
    pub fn export_params(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            layer.export_params(&mut out);
        }
        out
    }

    /// Loads a flat parameter vector in layer order.
    pub fn import_params(&mut self, data: &[F]) -> Result<()> {
        if data.len() != self.param_count() {
            return Err(Error::Contract(format!(
                "parameter blob has {} values, network needs {}",
                data.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            offset += layer.import_params(&data[offset..])?;
        }
        Ok(())
    }

    /// Casts parameters and structure to another scalar type.
    pub fn cast<G: Scalar>(&self) -> Network<G> {
        let cast_f = |v: F| G::from_f64_lossy(v.to_f64_lossy());
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Normalize { scale, shift } => Layer::Normalize {
                    scale: cast_f(*scale),
                    shift: cast_f(*shift),
                },
                Layer::Conv(c) => Layer::Conv(super::layers::Conv2d {
                    weight: c.weight.mapv(cast_f),
                    bias: c.bias.mapv(cast_f),
                    stride: c.stride,
                    pad: c.pad,
                }),
                Layer::Relu => Layer::Relu,
                Layer::LeakyRelu(a) => Layer::LeakyRelu(cast_f(*a)),
                Layer::MaxPool2 => Layer::MaxPool2,
                Layer::AvgPool2 => Layer::AvgPool2,
                Layer::GlobalAvgPool => Layer::GlobalAvgPool,
                Layer::Flatten => Layer::Flatten,
                Layer::Dense(d) => Layer::Dense(super::layers::Dense {
                    weight: d.weight.mapv(cast_f),
                    bias: d.bias.mapv(cast_f),
                }),
            })
            .collect();
        Network {
            layers,
            input_shape: self.input_shape,
            num_classes: self.num_classes,
            taps: self.taps.clone(),
        }
    }
}
