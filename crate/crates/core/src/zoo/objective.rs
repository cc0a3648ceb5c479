//! Registered scalar objectives that can be differentiated w.r.t. input
//! pixels. Every objective is written so the momentum loop minimizes it;
//! ascent-style attacks register their negated loss.

use ndarray::{Array2, Array3, Array4};

use super::net::Network;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Floor added inside the support-contrast logs so empty supports stay finite.
pub const SUPPORT_LOG_FLOOR: f64 = 1e-12;

/// A scalar objective over one image, identified by what it reads
/// (logits or a feature tap) and the data it is conditioned on.
#[derive(Debug, Clone)]
pub enum ScalarLoss<F: Scalar> {
    /// `−J(x, label)` where `J` is softmax cross-entropy: minimizing this
    /// ascends the classification loss.
    NegCrossEntropy { label: usize },
    /// `Σ weights ⊙ f_tap + offset` — the importance-weighted feature sum.
    WeightedFeatureSum {
        tap: String,
        weights: Array3<F>,
        offset: F,
    },
    /// `−‖f_tap − reference‖₂` — minimizing maximizes feature distortion.
    NegFeatureL2 { tap: String, reference: Array3<F> },
    /// `−Σ |f_tap − reference|` — unweighted divergence, maximized.
    NegAbsDiff { tap: String, reference: Array3<F> },
    /// `−[log(‖f⊙below‖ + floor) − log(‖f⊙above‖ + floor)]`: minimizing
    /// promotes below-mean support and suppresses above-mean support.
    NegSupportContrast {
        tap: String,
        below: Array3<F>,
        above: Array3<F>,
    },
    /// Σ of input pixels (test stub).
    PixelSum,
    /// Constant zero (test stub).
    Zero,
}

impl<F: Scalar> ScalarLoss<F> {
    /// Stable identifier used in manifests and error messages.
    pub fn id(&self) -> &'static str {
        match self {
            ScalarLoss::NegCrossEntropy { .. } => "neg_cross_entropy",
            ScalarLoss::WeightedFeatureSum { .. } => "weighted_feature_sum",
            ScalarLoss::NegFeatureL2 { .. } => "neg_feature_l2",
            ScalarLoss::NegAbsDiff { .. } => "neg_abs_diff",
            ScalarLoss::NegSupportContrast { .. } => "neg_support_contrast",
            ScalarLoss::PixelSum => "pixel_sum",
            ScalarLoss::Zero => "zero",
        }
    }

    /// The tap this loss reads, if any.
    pub fn tap(&self) -> Option<&str> {
        match self {
            ScalarLoss::WeightedFeatureSum { tap, .. }
            | ScalarLoss::NegFeatureL2 { tap, .. }
            | ScalarLoss::NegAbsDiff { tap, .. }
            | ScalarLoss::NegSupportContrast { tap, .. } => Some(tap),
            _ => None,
        }
    }

    /// Rewrites the tap name (used when routing into ensemble members).
    pub fn with_tap(&self, tap: &str) -> Self {
        let mut out = self.clone();
        match &mut out {
            ScalarLoss::WeightedFeatureSum { tap: t, .. }
            | ScalarLoss::NegFeatureL2 { tap: t, .. }
            | ScalarLoss::NegAbsDiff { tap: t, .. }
            | ScalarLoss::NegSupportContrast { tap: t, .. } => *t = tap.to_string(),
            _ => {}
        }
        out
    }
}

/// Softmax cross-entropy value and logit gradient for one row, computed in
/// f64 so the true-class component survives on saturated predictions
/// (`p ≈ 1` rounds to exactly 1 in f32, which would zero the component that
/// lowers the true logit). Returns `(J, dJ/dlogits)`.
pub fn cross_entropy_row<F: Scalar>(logits: &Array2<F>, label: usize) -> (F, Array2<F>) {
    let (n, k) = logits.dim();
    debug_assert_eq!(n, 1);
    debug_assert!(label < k);
    let row: Vec<f64> = logits.row(0).iter().map(|v| v.to_f64_lossy()).collect();
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut exp_sum = 0.0f64;
    for &v in &row {
        exp_sum += (v - max).exp();
    }
    let log_z = max + exp_sum.ln();
    let value = log_z - row[label];
    // p_label - 1 = -(sum of the other probabilities), computed directly so
    // it cannot cancel to zero.
    let mut others = 0.0f64;
    for (j, &v) in row.iter().enumerate() {
        if j != label {
            others += (v - max).exp() / exp_sum;
        }
    }
    let mut grad = Array2::zeros((1, k));
    for (j, &v) in row.iter().enumerate() {
        let g = if j == label {
            -others
        } else {
            (v - max).exp() / exp_sum
        };
        grad[[0, j]] = F::from_f64_lossy(g);
    }
    (F::from_f64_lossy(value), grad)
}

/// Evaluates a scalar loss on a single network, returning the value and the
/// gradient with respect to the input pixels.
pub fn eval_on_network<F: Scalar>(
    net: &Network<F>,
    x: &Array4<F>,
    loss: &ScalarLoss<F>,
) -> Result<(F, Array4<F>)> {
    match loss {
        ScalarLoss::Zero => Ok((F::zero(), Array4::zeros(x.dim()))),
        ScalarLoss::PixelSum => {
            let value = x.iter().copied().sum();
            Ok((value, Array4::from_elem(x.dim(), F::one())))
        }
        ScalarLoss::NegCrossEntropy { label } => {
            let acts = net.forward_trace(x);
            let logits = net.logits(&acts);
            if *label >= logits.dim().1 {
                return Err(Error::Contract(format!(
                    "label {label} out of range for {} classes",
                    logits.dim().1
                )));
            }
            let (j, dj) = cross_entropy_row(&logits, *label);
            let seed = net.seed_from_logit_grad(&dj.mapv(|v| -v));
            let grad = net.backward(&acts, acts.len() - 1, seed, 0, None);
            Ok((-j, grad))
        }
        _ => {
            let tap = loss.tap().expect("tap loss");
            let act_index = net
                .tap_act_index(tap)
                .ok_or_else(|| Error::UnknownTap {
                    tap: tap.to_string(),
                    model: "network".into(),
                })?;
            let acts = net.forward_to(x, act_index);
            let f = acts.last().unwrap();
            let (n, c, h, w) = f.dim();
            if n != 1 {
                return Err(Error::Contract(
                    "feature losses operate on a single image".into(),
                ));
            }
            let (value, seed3) = feature_loss_value_and_seed(loss, &f.to_shape((c, h, w)).unwrap().to_owned())?;
            let seed = seed3
                .into_shape_with_order((1, c, h, w))
                .expect("seed reshape");
            let grad = net.backward(&acts, act_index, seed, 0, None);
            Ok((value, grad))
        }
    }
}

/// Value and ∂value/∂features for the tap-based losses.
fn feature_loss_value_and_seed<F: Scalar>(
    loss: &ScalarLoss<F>,
    f: &Array3<F>,
) -> Result<(F, Array3<F>)> {
    match loss {
        ScalarLoss::WeightedFeatureSum {
            weights, offset, ..
        } => {
            if weights.dim() != f.dim() {
                return Err(Error::shape(
                    "weighted_feature_sum",
                    &[weights.dim().0, weights.dim().1, weights.dim().2],
                    &[f.dim().0, f.dim().1, f.dim().2],
                ));
            }
            let mut value = *offset;
            ndarray::Zip::from(weights).and(f).for_each(|&wv, &fv| {
                value += wv * fv;
            });
            Ok((value, weights.clone()))
        }
        ScalarLoss::NegFeatureL2 { reference, .. } => {
            if reference.dim() != f.dim() {
                return Err(Error::shape(
                    "neg_feature_l2",
                    &[reference.dim().0, reference.dim().1, reference.dim().2],
                    &[f.dim().0, f.dim().1, f.dim().2],
                ));
            }
            let diff = f - reference;
            let norm = diff.iter().map(|&v| v * v).sum::<F>().sqrt();
            if norm == F::zero() {
                return Ok((F::zero(), Array3::zeros(f.dim())));
            }
            let seed = diff.mapv(|v| -(v / norm));
            Ok((-norm, seed))
        }
        ScalarLoss::NegAbsDiff { reference, .. } => {
            if reference.dim() != f.dim() {
                return Err(Error::shape(
                    "neg_abs_diff",
                    &[reference.dim().0, reference.dim().1, reference.dim().2],
                    &[f.dim().0, f.dim().1, f.dim().2],
                ));
            }
            let mut value = F::zero();
            let mut seed = Array3::zeros(f.dim());
            ndarray::Zip::from(&mut seed)
                .and(f)
                .and(reference)
                .for_each(|s, &fv, &rv| {
                    let d = fv - rv;
                    value += d.abs();
                    *s = if d > F::zero() {
                        -F::one()
                    } else if d < F::zero() {
                        F::one()
                    } else {
                        F::zero()
                    };
                });
            Ok((-value, seed))
        }
        ScalarLoss::NegSupportContrast { below, above, .. } => {
            if below.dim() != f.dim() || above.dim() != f.dim() {
                return Err(Error::shape(
                    "neg_support_contrast",
                    &[f.dim().0, f.dim().1, f.dim().2],
                    &[below.dim().0, below.dim().1, below.dim().2],
                ));
            }
            let floor = F::from_f64_lossy(SUPPORT_LOG_FLOOR);
            let norm_of = |mask: &Array3<F>| -> F {
                let mut s = F::zero();
                ndarray::Zip::from(f).and(mask).for_each(|&fv, &mv| {
                    let v = fv * mv;
                    s += v * v;
                });
                s.sqrt()
            };
            let nb = norm_of(below);
            let na = norm_of(above);
            // fda = log(nb + floor) − log(na + floor); internal loss = −fda.
            let value = (na + floor).ln() - (nb + floor).ln();
            let mut seed = Array3::zeros(f.dim());
            ndarray::Zip::from(&mut seed)
                .and(f)
                .and(below)
                .and(above)
                .for_each(|s, &fv, &bm, &am| {
                    let mut g = F::zero();
                    if bm > F::zero() && nb > F::zero() {
                        g -= fv / (nb * (nb + floor));
                    }
                    if am > F::zero() && na > F::zero() {
                        g += fv / (na * (na + floor));
                    }
                    *s = g;
                });
            Ok((value, seed))
        }
        _ => unreachable!("logit losses handled by caller"),
    }
}
