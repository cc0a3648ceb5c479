//! Feature importance by gradient aggregation.
//!
//! The importance of a feature map is estimated by averaging the true-class
//! logit gradient over many Bernoulli pixel-drop copies of the input and
//! ℓ2-normalizing the sum. Structure-carrying features keep a consistent
//! gradient across drops; model-specific noise averages out.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageBatch, LabelledExample};
use crate::rng::{uniform_f64, RunRng};
use crate::scalar::Scalar;
use crate::zoo::{GradientMap, ModelHandle};

/// Binary pixel-drop mask over one image.
#[derive(Debug, Clone)]
pub struct DropMask<F: Scalar> {
    /// `(c, h, w)` of zeros and ones.
    pub values: Array3<F>,
    pub keep_prob: f64,
}

/// Aggregation settings: drop probability, number of masked copies, tap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    /// Probability each pixel is dropped, in `[0, 1)`.
    pub drop_prob: f64,
    /// Number of masked copies averaged.
    pub ensemble_number: usize,
    /// Tap whose feature importance is estimated.
    pub tap: String,
    /// Draw one Bernoulli per element instead of one per spatial location
    /// shared across channels.
    #[serde(default)]
    pub per_element_mask: bool,
}

impl AggregationConfig {
    pub fn new(drop_prob: f64, ensemble_number: usize, tap: impl Into<String>) -> Result<Self> {
        let cfg = Self {
            drop_prob,
            ensemble_number,
            tap: tap.into(),
            per_element_mask: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::Parameter(format!(
                "drop_prob must be in [0, 1), got {}",
                self.drop_prob
            )));
        }
        if self.ensemble_number < 1 {
            return Err(Error::Parameter("ensemble_number must be >= 1".into()));
        }
        Ok(())
    }
}

/// The ℓ2-normalized, mask-averaged feature-map gradient: the feature
/// importance map Δ.
#[derive(Debug, Clone)]
pub struct AggregateGradient<F: Scalar> {
    /// Shaped like the tap's per-image feature map `(c, h, w)`.
    pub values: Array3<F>,
    pub source_config: AggregationConfig,
}

/// Samples an iid Bernoulli(1 − drop\_prob) keep-mask for an image of shape
/// `(c, h, w)`. By default one draw per spatial location is shared across
/// channels (pixel dropping); `per_element` draws per element instead.
/// Draws consume the stream row-major (h outer, w inner; channels outermost
/// in per-element mode), so a given rng state pins the mask exactly.
pub fn sample_mask<F: Scalar>(
    shape: (usize, usize, usize),
    drop_prob: f64,
    per_element: bool,
    rng: &mut RunRng,
) -> Result<DropMask<F>> {
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::Parameter(format!(
            "drop_prob must be in [0, 1), got {drop_prob}"
        )));
    }
    let keep = 1.0 - drop_prob;
    let (c, h, w) = shape;
    let mut values = Array3::zeros(shape);
    if per_element {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    values[[ci, y, x]] = if uniform_f64(rng, 0.0, 1.0) < keep {
                        F::one()
                    } else {
                        F::zero()
                    };
                }
            }
        }
    } else {
        for y in 0..h {
            for x in 0..w {
                let v = if uniform_f64(rng, 0.0, 1.0) < keep {
                    F::one()
                } else {
                    F::zero()
                };
                for ci in 0..c {
                    values[[ci, y, x]] = v;
                }
            }
        }
    }
    Ok(DropMask {
        values,
        keep_prob: keep,
    })
}

/// Raw true-class logit gradient w.r.t. the tap's feature map, computed on
/// the unmasked image.
pub fn raw_gradient<F: Scalar>(
    model: &ModelHandle<F>,
    example: &LabelledExample<F>,
    tap: &str,
) -> Result<GradientMap<F>> {
    model.grad_logit_wrt_features(&example.image, tap, example.label)
}

/// Aggregate gradient: sums the logit gradient over `ensemble_number` masked
/// copies of the image (masks drawn in order from `rng`) and ℓ2-normalizes
/// the sum. Errors with [`Error::DegenerateGradient`] if the sum is exactly
/// zero.
pub fn aggregate_gradient<F: Scalar>(
    model: &ModelHandle<F>,
    example: &LabelledExample<F>,
    cfg: &AggregationConfig,
    rng: &mut RunRng,
) -> Result<AggregateGradient<F>> {
    cfg.validate()?;
    let shape = example.image.image_shape();
    let mut sum: Option<Array3<F>> = None;
    for _ in 0..cfg.ensemble_number {
        let mask = sample_mask::<F>(shape, cfg.drop_prob, cfg.per_element_mask, rng)?;
        let masked = apply_mask(&example.image, &mask);
        let grad = model.grad_logit_wrt_features(&masked, &cfg.tap, example.label)?;
        let (_, gc, gh, gw) = grad.values.dim();
        let grad3 = grad
            .values
            .into_shape_with_order((gc, gh, gw))
            .expect("batch-1 gradient");
        sum = Some(match sum {
            None => grad3,
            Some(acc) => acc + grad3,
        });
    }
    let sum = sum.expect("ensemble_number >= 1");
    let norm = l2_norm(&sum);
    if norm == F::zero() {
        return Err(Error::DegenerateGradient);
    }
    Ok(AggregateGradient {
        values: sum.mapv(|v| v / norm),
        source_config: cfg.clone(),
    })
}

/// Multiplies an image by a keep-mask in pixel space.
pub fn apply_mask<F: Scalar>(image: &ImageBatch<F>, mask: &DropMask<F>) -> ImageBatch<F> {
    let (c, h, w) = image.image_shape();
    let mut data = image.data().clone();
    let mut view = data.index_axis_mut(ndarray::Axis(0), 0);
    debug_assert_eq!(mask.values.dim(), (c, h, w));
    ndarray::Zip::from(&mut view)
        .and(&mask.values)
        .for_each(|px, &m| *px = *px * m);
    ImageBatch::from_unclamped(data, image.value_range())
}

fn l2_norm<F: Scalar>(a: &Array3<F>) -> F {
    a.iter().map(|&v| v * v).sum::<F>().sqrt()
}

/// Channelwise sum of `Δ ⊙ f`, min-max normalized to `[0, 1]`. A constant
/// product map yields an all-zeros heatmap.
pub fn importance_heatmap<F: Scalar>(
    agg: &AggregateGradient<F>,
    features: &Array3<F>,
) -> Result<Array2<F>> {
    if agg.values.dim() != features.dim() {
        let d = agg.values.dim();
        let f = features.dim();
        return Err(Error::shape(
            "importance_heatmap",
            &[d.0, d.1, d.2],
            &[f.0, f.1, f.2],
        ));
    }
    let (c, h, w) = features.dim();
    let mut map = Array2::zeros((h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                map[[y, x]] += agg.values[[ci, y, x]] * features[[ci, y, x]];
            }
        }
    }
    let min = map.iter().cloned().fold(F::infinity(), F::min);
    let max = map.iter().cloned().fold(F::neg_infinity(), F::max);
    if max == min {
        return Ok(Array2::zeros((h, w)));
    }
    let span = max - min;
    Ok(map.mapv(|v| (v - min) / span))
}

/// Heatmap of a raw (non-aggregated) gradient map against its features —
/// used by the visualizer for the side-by-side raw/aggregate comparison.
pub fn gradient_heatmap<F: Scalar>(
    grad: &Array3<F>,
    features: &Array3<F>,
) -> Result<Array2<F>> {
    let norm = l2_norm(grad);
    let normed = if norm == F::zero() {
        grad.clone()
    } else {
        grad.mapv(|v| v / norm)
    };
    importance_heatmap(
        &AggregateGradient {
            values: normed,
            source_config: AggregationConfig {
                drop_prob: 0.0,
                ensemble_number: 1,
                tap: String::new(),
                per_element_mask: false,
            },
        },
        features,
    )
}
