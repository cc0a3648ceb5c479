//! Sequential layer stack with manual forward/backward passes.
//!
//! Every activation is carried as a rank-4 array `(batch, channel, h, w)`;
//! dense layers operate on `(batch, features, 1, 1)`. Backprop walks the
//! saved activation trace, so gradients can be seeded at the logits or at
//! any intermediate activation and propagated to the input or to the
//! parameters.

use ndarray::{s, Array1, Array2, Array4, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// 2-D convolution with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d<F: Scalar> {
    /// `(out_channels, in_channels, kh, kw)`
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub stride: usize,
    pub pad: usize,
}

/// Fully connected layer on flattened activations.
#[derive(Debug, Clone)]
pub struct Dense<F: Scalar> {
    /// `(out_features, in_features)`
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

/// One stage of the network.
#[derive(Debug, Clone)]
pub enum Layer<F: Scalar> {
    /// Fixed affine pixel normalization `y = x * scale + shift`.
    Normalize { scale: F, shift: F },
    Conv(Conv2d<F>),
    Relu,
    LeakyRelu(F),
    MaxPool2,
    AvgPool2,
    GlobalAvgPool,
    Flatten,
    Dense(Dense<F>),
}

/// Parameter gradients accumulated during a training backward pass, parallel
/// to the layer list.
#[derive(Debug, Clone)]
pub enum LayerGrads<F: Scalar> {
    Conv { dw: Array4<F>, db: Array1<F> },
    Dense { dw: Array2<F>, db: Array1<F> },
    None,
}

impl<F: Scalar> Layer<F> {
    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        match self {
            Layer::Normalize { scale, shift } => x.mapv(|v| v * *scale + *shift),
            Layer::Conv(c) => c.forward(x),
            Layer::Relu => x.mapv(|v| if v > F::zero() { v } else { F::zero() }),
            Layer::LeakyRelu(a) => x.mapv(|v| if v > F::zero() { v } else { v * *a }),
            Layer::MaxPool2 => max_pool2(x),
            Layer::AvgPool2 => avg_pool2(x),
            Layer::GlobalAvgPool => global_avg_pool(x),
            Layer::Flatten => {
                let (n, c, h, w) = x.dim();
                x.to_owned()
                    .into_shape_with_order((n, c * h * w, 1, 1))
                    .expect("flatten reshape")
            }
            Layer::Dense(d) => d.forward(x),
        }
    }

    /// Propagates `dy` through the layer given its saved input `x`.
    /// When `grads` is provided, parameter gradients are written into it.
    pub fn backward(
        &self,
        x: &Array4<F>,
        dy: &Array4<F>,
        grads: Option<&mut LayerGrads<F>>,
    ) -> Array4<F> {
        match self {
            Layer::Normalize { scale, .. } => dy.mapv(|v| v * *scale),
            Layer::Conv(c) => c.backward(x, dy, grads),
            Layer::Relu => {
                let mut dx = dy.clone();
                ndarray::Zip::from(&mut dx).and(x).for_each(|g, &v| {
                    if v <= F::zero() {
                        *g = F::zero();
                    }
                });
                dx
            }
            Layer::LeakyRelu(a) => {
                let mut dx = dy.clone();
                ndarray::Zip::from(&mut dx).and(x).for_each(|g, &v| {
                    if v <= F::zero() {
                        *g = *g * *a;
                    }
                });
                dx
            }
            Layer::MaxPool2 => max_pool2_backward(x, dy),
            Layer::AvgPool2 => avg_pool2_backward(x, dy),
            Layer::GlobalAvgPool => {
                let (n, c, h, w) = x.dim();
                let inv = F::from_f64_lossy(1.0 / (h * w) as f64);
                let mut dx = Array4::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let g = dy[[ni, ci, 0, 0]] * inv;
                        dx.slice_mut(s![ni, ci, .., ..]).fill(g);
                    }
                }
                dx
            }
            Layer::Flatten => {
                let dim = x.dim();
                dy.to_owned()
                    .into_shape_with_order(dim)
                    .expect("flatten backward reshape")
            }
            Layer::Dense(d) => d.backward(x, dy, grads),
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Conv(_) | Layer::Dense(_))
    }

    pub fn zero_grads(&self) -> LayerGrads<F> {
        match self {
            Layer::Conv(c) => LayerGrads::Conv {
                dw: Array4::zeros(c.weight.dim()),
                db: Array1::zeros(c.bias.len()),
            },
            Layer::Dense(d) => LayerGrads::Dense {
                dw: Array2::zeros(d.weight.dim()),
                db: Array1::zeros(d.bias.len()),
            },
            _ => LayerGrads::None,
        }
    }

    /// Number of scalar parameters, in serialization order (weight, bias).
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv(c) => c.weight.len() + c.bias.len(),
            Layer::Dense(d) => d.weight.len() + d.bias.len(),
            _ => 0,
        }
    }

    /// Appends parameters to `out` in serialization order.
    pub fn export_params(&self, out: &mut Vec<F>) {
        match self {
            Layer::Conv(c) => {
                out.extend(c.weight.iter().copied());
                out.extend(c.bias.iter().copied());
            }
            Layer::Dense(d) => {
                out.extend(d.weight.iter().copied());
                out.extend(d.bias.iter().copied());
            }
            _ => {}
        }
    }

    /// Loads parameters from a flat slice, returning how many were consumed.
    pub fn import_params(&mut self, data: &[F]) -> Result<usize> {
        let need = self.param_count();
        if data.len() < need {
            return Err(Error::Contract(format!(
                "parameter blob too short: layer needs {need}, {} left",
                data.len()
            )));
        }
        match self {
            Layer::Conv(c) => {
                let wlen = c.weight.len();
                c.weight
                    .iter_mut()
                    .zip(&data[..wlen])
                    .for_each(|(w, &v)| *w = v);
                c.bias
                    .iter_mut()
                    .zip(&data[wlen..need])
                    .for_each(|(b, &v)| *b = v);
            }
            Layer::Dense(d) => {
                let wlen = d.weight.len();
                d.weight
                    .iter_mut()
                    .zip(&data[..wlen])
                    .for_each(|(w, &v)| *w = v);
                d.bias
                    .iter_mut()
                    .zip(&data[wlen..need])
                    .for_each(|(b, &v)| *b = v);
            }
            _ => {}
        }
        Ok(need)
    }

    /// Output shape for a given input shape `(c, h, w)`.
    pub fn out_shape(&self, input: (usize, usize, usize)) -> (usize, usize, usize) {
        let (c, h, w) = input;
        match self {
            Layer::Normalize { .. } | Layer::Relu | Layer::LeakyRelu(_) => (c, h, w),
            Layer::Conv(cv) => {
                let (co, _ci, kh, kw) = cv.weight.dim();
                let oh = (h + 2 * cv.pad - kh) / cv.stride + 1;
                let ow = (w + 2 * cv.pad - kw) / cv.stride + 1;
                (co, oh, ow)
            }
            Layer::MaxPool2 | Layer::AvgPool2 => (c, h / 2, w / 2),
            Layer::GlobalAvgPool => (c, 1, 1),
            Layer::Flatten => (c * h * w, 1, 1),
            Layer::Dense(d) => (d.weight.dim().0, 1, 1),
        }
    }
}

impl<F: Scalar> Conv2d<F> {
    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (n, cin, h, w) = x.dim();
        let (cout, cin_w, kh, kw) = self.weight.dim();
        assert_eq!(cin, cin_w, "conv input channels");
        let oh = (h + 2 * self.pad - kh) / self.stride + 1;
        let ow = (w + 2 * self.pad - kw) / self.stride + 1;

        let col = im2col(x, kh, kw, self.stride, self.pad, oh, ow);
        let w2 = self
            .weight
            .to_shape((cout, cin * kh * kw))
            .expect("conv weight reshape");
        let y_mat = w2.dot(&col); // (cout, n*oh*ow)

        let mut y = Array4::zeros((n, cout, oh, ow));
        let span = oh * ow;
        for co in 0..cout {
            let b = self.bias[co];
            let row = y_mat.row(co);
            for ni in 0..n {
                let src = row.slice(s![ni * span..(ni + 1) * span]);
                let mut dst = y.slice_mut(s![ni, co, .., ..]);
                let mut dst = dst
                    .as_slice_mut()
                    .expect("contiguous conv output")
                    .iter_mut();
                for &v in src.iter() {
                    *dst.next().unwrap() = v + b;
                }
            }
        }
        y
    }

    pub fn backward(
        &self,
        x: &Array4<F>,
        dy: &Array4<F>,
        grads: Option<&mut LayerGrads<F>>,
    ) -> Array4<F> {
        let (n, cin, h, w) = x.dim();
        let (cout, _, kh, kw) = self.weight.dim();
        let (_, _, oh, ow) = dy.dim();
        let span = oh * ow;

        // (cout, n*oh*ow) with the same column layout as im2col.
        let mut dy_mat = Array2::zeros((cout, n * span));
        for co in 0..cout {
            for ni in 0..n {
                let src = dy.slice(s![ni, co, .., ..]);
                let src = src.to_shape(span).expect("dy reshape");
                dy_mat
                    .slice_mut(s![co, ni * span..(ni + 1) * span])
                    .assign(&src);
            }
        }

        if let Some(LayerGrads::Conv { dw, db }) = grads {
            let col = im2col(x, kh, kw, self.stride, self.pad, oh, ow);
            let dw_mat = dy_mat.dot(&col.t()); // (cout, cin*kh*kw)
            let dw_new = dw_mat
                .into_shape_with_order((cout, cin, kh, kw))
                .expect("dw reshape");
            *dw += &dw_new;
            *db += &dy_mat.sum_axis(Axis(1));
        }

        let w2 = self
            .weight
            .to_shape((cout, cin * kh * kw))
            .expect("conv weight reshape");
        let dcol = w2.t().dot(&dy_mat); // (cin*kh*kw, n*oh*ow)
        col2im(&dcol, (n, cin, h, w), kh, kw, self.stride, self.pad, oh, ow)
    }
}

impl<F: Scalar> Dense<F> {
    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!((h, w), (1, 1), "dense expects flattened input");
        let x2 = x.to_shape((n, c)).expect("dense input reshape");
        let mut y2 = x2.dot(&self.weight.t()); // (n, out)
        for mut row in y2.rows_mut() {
            row += &self.bias;
        }
        let out = self.weight.dim().0;
        y2.into_shape_with_order((n, out, 1, 1))
            .expect("dense output reshape")
    }

    pub fn backward(
        &self,
        x: &Array4<F>,
        dy: &Array4<F>,
        grads: Option<&mut LayerGrads<F>>,
    ) -> Array4<F> {
        let (n, c, _, _) = x.dim();
        let out = self.weight.dim().0;
        let x2 = x.to_shape((n, c)).expect("dense input reshape");
        let dy2 = dy.to_shape((n, out)).expect("dense dy reshape");

        if let Some(LayerGrads::Dense { dw, db }) = grads {
            *dw += &dy2.t().dot(&x2);
            *db += &dy2.sum_axis(Axis(0));
        }

        let dx2 = dy2.dot(&self.weight); // (n, in)
        dx2.into_shape_with_order((n, c, 1, 1))
            .expect("dense dx reshape")
    }
}

fn im2col<F: Scalar>(
    x: &Array4<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<F> {
    let (n, cin, h, w) = x.dim();
    let rows = cin * kh * kw;
    let cols = n * oh * ow;
    let mut col = vec![F::zero(); rows * cols];
    let xs = x.as_slice().expect("contiguous input");

    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let base = row * cols;
                for ni in 0..n {
                    let x_img = ni * cin * h * w + ci * h * w;
                    for oi in 0..oh {
                        let ih = (oi * stride + ki) as isize - pad as isize;
                        let out_base = base + (ni * oh + oi) * ow;
                        if ih < 0 || ih >= h as isize {
                            continue; // zero padding
                        }
                        let x_row = x_img + ih as usize * w;
                        for oj in 0..ow {
                            let iw = (oj * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            col[out_base + oj] = xs[x_row + iw as usize];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((rows, cols), col).expect("im2col shape")
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    dcol: &Array2<F>,
    dim: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<F> {
    let (n, cin, h, w) = dim;
    let cols = n * oh * ow;
    let mut dx = vec![F::zero(); n * cin * h * w];
    let ds = dcol.as_slice().expect("contiguous dcol");

    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let base = row * cols;
                for ni in 0..n {
                    let x_img = ni * cin * h * w + ci * h * w;
                    for oi in 0..oh {
                        let ih = (oi * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_row = x_img + ih as usize * w;
                        let in_base = base + (ni * oh + oi) * ow;
                        for oj in 0..ow {
                            let iw = (oj * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            dx[x_row + iw as usize] += ds[in_base + oj];
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec(dim, dx).expect("col2im shape")
}

fn max_pool2<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let (i, j) = (oi * 2, oj * 2);
                    let mut m = x[[ni, ci, i, j]];
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let v = x[[ni, ci, i + di, j + dj]];
                        if v > m {
                            m = v;
                        }
                    }
                    y[[ni, ci, oi, oj]] = m;
                }
            }
        }
    }
    y
}

fn max_pool2_backward<F: Scalar>(x: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let (i, j) = (oi * 2, oj * 2);
                    // First maximum in scan order wins, deterministically.
                    let (mut bi, mut bj) = (i, j);
                    let mut m = x[[ni, ci, i, j]];
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let v = x[[ni, ci, i + di, j + dj]];
                        if v > m {
                            m = v;
                            bi = i + di;
                            bj = j + dj;
                        }
                    }
                    dx[[ni, ci, bi, bj]] += dy[[ni, ci, oi, oj]];
                }
            }
        }
    }
    dx
}

fn avg_pool2<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::from_f64_lossy(0.25);
    let mut y = Array4::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let (i, j) = (oi * 2, oj * 2);
                    let s = x[[ni, ci, i, j]]
                        + x[[ni, ci, i, j + 1]]
                        + x[[ni, ci, i + 1, j]]
                        + x[[ni, ci, i + 1, j + 1]];
                    y[[ni, ci, oi, oj]] = s * quarter;
                }
            }
        }
    }
    y
}

fn avg_pool2_backward<F: Scalar>(x: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::from_f64_lossy(0.25);
    let mut dx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let g = dy[[ni, ci, oi, oj]] * quarter;
                    let (i, j) = (oi * 2, oj * 2);
                    dx[[ni, ci, i, j]] += g;
                    dx[[ni, ci, i, j + 1]] += g;
                    dx[[ni, ci, i + 1, j]] += g;
                    dx[[ni, ci, i + 1, j + 1]] += g;
                }
            }
        }
    }
    dx
}

fn global_avg_pool<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let inv = F::from_f64_lossy(1.0 / (h * w) as f64);
    let mut y = Array4::zeros((n, c, 1, 1));
    for ni in 0..n {
        for ci in 0..c {
            let mut s = F::zero();
            for v in x.slice(s![ni, ci, .., ..]).iter() {
                s += *v;
            }
            y[[ni, ci, 0, 0]] = s * inv;
        }
    }
    y
}
