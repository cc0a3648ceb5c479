//! Input-diversity and gradient-smoothing transforms used by the
//! transfer-oriented attack combinations.

use ndarray::{Array2, Array4};

use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::rng::{uniform_f64, uniform_usize, RunRng};
use crate::scalar::Scalar;

/// One sampled input-diversity draw: random downscale + random zero-pad
/// offset, or identity. Kept so the image gradient can be pulled back
/// through the exact transform that produced the forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiversityDraw {
    pub applied: bool,
    pub resized_h: usize,
    pub resized_w: usize,
    pub top: usize,
    pub left: usize,
}

/// Default smallest resize factor drawn by input diversity.
pub const DIVERSITY_MIN_FACTOR: f64 = 0.875;

/// Samples the per-iteration diversity transform. Draw order from `rng`:
/// coin, resize factor, top offset, left offset (the last three only when
/// the coin passes). `min_factor` bounds the random downscale.
pub fn sample_diversity(
    shape: (usize, usize),
    prob: f64,
    min_factor: f64,
    rng: &mut RunRng,
) -> Result<DiversityDraw> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::Parameter(format!(
            "transform probability must be in [0, 1], got {prob}"
        )));
    }
    if !(0.0..=1.0).contains(&min_factor) {
        return Err(Error::Parameter(format!(
            "resize factor must be in (0, 1], got {min_factor}"
        )));
    }
    let (h, w) = shape;
    let coin = uniform_f64(rng, 0.0, 1.0);
    if coin >= prob {
        return Ok(DiversityDraw {
            applied: false,
            resized_h: h,
            resized_w: w,
            top: 0,
            left: 0,
        });
    }
    let factor = uniform_f64(rng, min_factor, 1.0);
    let rh = ((h as f64 * factor).floor() as usize).max(1);
    let rw = ((w as f64 * factor).floor() as usize).max(1);
    let top = uniform_usize(rng, h - rh + 1);
    let left = uniform_usize(rng, w - rw + 1);
    Ok(DiversityDraw {
        applied: true,
        resized_h: rh,
        resized_w: rw,
        top,
        left,
    })
}

impl DiversityDraw {
    /// Applies the transform: bilinear downscale, then zero-pad back to the
    /// original dims at the drawn offset. Identity when not applied.
    pub fn apply<F: Scalar>(&self, image: &ImageBatch<F>) -> ImageBatch<F> {
        if !self.applied {
            return image.clone();
        }
        let (n, c, h, w) = image.data().dim();
        let small = bilinear_resize(image.data(), self.resized_h, self.resized_w);
        let mut out = Array4::zeros((n, c, h, w));
        out.slice_mut(ndarray::s![
            ..,
            ..,
            self.top..self.top + self.resized_h,
            self.left..self.left + self.resized_w
        ])
        .assign(&small);
        ImageBatch::from_unclamped(out, image.value_range())
    }

    /// Pulls a gradient at the transformed image back to the original image
    /// coordinates (transpose of the linear resize+pad operator).
    pub fn vjp<F: Scalar>(&self, grad: &Array4<F>) -> Array4<F> {
        if !self.applied {
            return grad.clone();
        }
        let cropped = grad
            .slice(ndarray::s![
                ..,
                ..,
                self.top..self.top + self.resized_h,
                self.left..self.left + self.resized_w
            ])
            .to_owned();
        let (_, _, h, w) = grad.dim();
        bilinear_resize_transpose(&cropped, h, w)
    }
}

/// Random resize-and-pad applied with probability `prob`; otherwise the
/// image passes through unchanged.
pub fn input_diversity<F: Scalar>(
    image: &ImageBatch<F>,
    prob: f64,
    rng: &mut RunRng,
) -> Result<ImageBatch<F>> {
    let (_, h, w) = image.image_shape();
    Ok(sample_diversity((h, w), prob, DIVERSITY_MIN_FACTOR, rng)?.apply(image))
}

/// Bilinear interpolation weights for one output coordinate.
fn lerp_coords(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = (dst as f64 + 0.5) * scale - 0.5;
    let pos = pos.max(0.0);
    let i0 = pos.floor() as usize;
    let i0 = i0.min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    let frac = (pos - i0 as f64).clamp(0.0, 1.0);
    (i0, i1, frac)
}

fn bilinear_resize<F: Scalar>(x: &Array4<F>, oh: usize, ow: usize) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, c, oh, ow));
    for oy in 0..oh {
        let (y0, y1, fy) = lerp_coords(oy, oh, h);
        let fy = F::from_f64_lossy(fy);
        for ox in 0..ow {
            let (x0, x1, fx) = lerp_coords(ox, ow, w);
            let fx = F::from_f64_lossy(fx);
            for ni in 0..n {
                for ci in 0..c {
                    let a = x[[ni, ci, y0, x0]];
                    let b = x[[ni, ci, y0, x1]];
                    let d = x[[ni, ci, y1, x0]];
                    let e = x[[ni, ci, y1, x1]];
                    let top = a + (b - a) * fx;
                    let bot = d + (e - d) * fx;
                    out[[ni, ci, oy, ox]] = top + (bot - top) * fy;
                }
            }
        }
    }
    out
}

/// Transpose of [`bilinear_resize`]: scatters each output gradient onto the
/// four source pixels with the interpolation weights.
fn bilinear_resize_transpose<F: Scalar>(g: &Array4<F>, sh: usize, sw: usize) -> Array4<F> {
    let (n, c, oh, ow) = g.dim();
    let mut out = Array4::zeros((n, c, sh, sw));
    for oy in 0..oh {
        let (y0, y1, fy) = lerp_coords(oy, oh, sh);
        let fy = F::from_f64_lossy(fy);
        for ox in 0..ow {
            let (x0, x1, fx) = lerp_coords(ox, ow, sw);
            let fx = F::from_f64_lossy(fx);
            let one = F::one();
            for ni in 0..n {
                for ci in 0..c {
                    let gv = g[[ni, ci, oy, ox]];
                    out[[ni, ci, y0, x0]] += gv * (one - fx) * (one - fy);
                    out[[ni, ci, y0, x1]] += gv * fx * (one - fy);
                    out[[ni, ci, y1, x0]] += gv * (one - fx) * fy;
                    out[[ni, ci, y1, x1]] += gv * fx * fy;
                }
            }
        }
    }
    out
}

/// Low-pass kernel family for the translation-invariant approximation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// Truncated Gaussian with `sigma = size / 3`.
    #[default]
    Gaussian,
    /// 2-D triangle (linear falloff).
    Triangle,
    /// Flat box.
    Uniform,
}

/// Normalized low-pass kernel of the given family.
pub fn smoothing_kernel<F: Scalar>(family: KernelFamily, size: usize) -> Result<Array2<F>> {
    if size % 2 == 0 || size == 0 {
        return Err(Error::Parameter(format!(
            "kernel size must be odd and >= 1, got {size}"
        )));
    }
    let half = (size / 2) as isize;
    let mut k = Array2::zeros((size, size));
    let mut sum = 0.0;
    for dy in -half..=half {
        for dx in -half..=half {
            let v = match family {
                KernelFamily::Gaussian => {
                    let sigma = size as f64 / 3.0;
                    (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp()
                }
                KernelFamily::Triangle => {
                    let fy = 1.0 - dy.unsigned_abs() as f64 / (half as f64 + 1.0);
                    let fx = 1.0 - dx.unsigned_abs() as f64 / (half as f64 + 1.0);
                    fy * fx
                }
                KernelFamily::Uniform => 1.0,
            };
            k[[(dy + half) as usize, (dx + half) as usize]] = v;
            sum += v;
        }
    }
    Ok(k.mapv(|v| F::from_f64_lossy(v / sum)))
}

/// Normalized Gaussian kernel with `sigma = size / 3` (the default family).
pub fn gaussian_kernel<F: Scalar>(size: usize) -> Result<Array2<F>> {
    smoothing_kernel(KernelFamily::Gaussian, size)
}

/// Uniform projection kernel: zero center, `1/(size² − 1)` elsewhere.
pub fn uniform_project_kernel<F: Scalar>(size: usize) -> Result<Array2<F>> {
    if size % 2 == 0 || size == 0 {
        return Err(Error::Parameter(format!(
            "kernel size must be odd and >= 1, got {size}"
        )));
    }
    if size == 1 {
        return Ok(Array2::zeros((1, 1)));
    }
    let v = F::from_f64_lossy(1.0 / ((size * size - 1) as f64));
    let mut k = Array2::from_elem((size, size), v);
    k[[size / 2, size / 2]] = F::zero();
    Ok(k)
}

/// Depthwise same-padding 2-D convolution of every channel with `kernel`
/// (zero padding at the borders).
pub fn depthwise_conv_same<F: Scalar>(x: &Array4<F>, kernel: &Array2<F>) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let (kh, kw) = kernel.dim();
    let (hy, hx) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x_ in 0..w {
                    let mut acc = F::zero();
                    for ky in 0..kh {
                        let sy = y as isize + ky as isize - hy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let sx = x_ as isize + kx as isize - hx;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            acc += kernel[[ky, kx]] * x[[ni, ci, sy as usize, sx as usize]];
                        }
                    }
                    out[[ni, ci, y, x_]] = acc;
                }
            }
        }
    }
    out
}

/// Translation-invariant gradient smoothing: depthwise convolution with a
/// normalized Gaussian low-pass kernel (see [`smoothing_kernel`] for the
/// other families).
pub fn translation_invariant_smooth<F: Scalar>(
    grad: &Array4<F>,
    kernel_size: usize,
) -> Result<Array4<F>> {
    translation_invariant_smooth_with(grad, KernelFamily::Gaussian, kernel_size)
}

/// Family-parameterized variant of [`translation_invariant_smooth`].
pub fn translation_invariant_smooth_with<F: Scalar>(
    grad: &Array4<F>,
    family: KernelFamily,
    kernel_size: usize,
) -> Result<Array4<F>> {
    let kernel = smoothing_kernel::<F>(family, kernel_size)?;
    if kernel_size == 1 {
        return Ok(grad.clone());
    }
    Ok(depthwise_conv_same(grad, &kernel))
}
