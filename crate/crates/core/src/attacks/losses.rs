//! Attack loss functions over feature maps.
//!
//! These are the natural-sign values (what the papers print); the optimizer
//! path receives them through [`ScalarLoss`] wrappers whose sign is arranged
//! so minimization implements each method's intent.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::featimp::AggregateGradient;
use crate::scalar::Scalar;
use crate::zoo::objective::{ScalarLoss, SUPPORT_LOG_FLOOR};

fn check_shapes<F: Scalar>(context: &'static str, a: &Array3<F>, b: &Array3<F>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            context,
            &[a.dim().0, a.dim().1, a.dim().2],
            &[b.dim().0, b.dim().1, b.dim().2],
        ));
    }
    Ok(())
}

/// Importance-weighted feature loss `Σ (Δ ⊙ f)` — the attack minimizes it.
pub fn fia_loss<F: Scalar>(agg: &AggregateGradient<F>, features: &Array3<F>) -> Result<F> {
    check_shapes("fia_loss", &agg.values, features)?;
    let mut sum = F::zero();
    ndarray::Zip::from(&agg.values)
        .and(features)
        .for_each(|&d, &f| sum += d * f);
    Ok(sum)
}

/// Unweighted feature distortion `‖f_adv − f_clean‖₂` — maximized.
pub fn nrdm_loss<F: Scalar>(features_adv: &Array3<F>, features_clean: &Array3<F>) -> Result<F> {
    check_shapes("nrdm_loss", features_adv, features_clean)?;
    let mut sum = F::zero();
    ndarray::Zip::from(features_adv)
        .and(features_clean)
        .for_each(|&a, &c| {
            let d = a - c;
            sum += d * d;
        });
    Ok(sum.sqrt())
}

/// Support masks for the contrast loss: positions where the clean feature is
/// strictly below / strictly above the channel-mean activation at its spatial
/// location. Ties belong to neither support.
pub fn fda_supports<F: Scalar>(features_clean: &Array3<F>) -> (Array3<F>, Array3<F>) {
    let (c, h, w) = features_clean.dim();
    let inv_c = F::from_f64_lossy(1.0 / c as f64);
    let mut below = Array3::zeros((c, h, w));
    let mut above = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut mean = F::zero();
            for ci in 0..c {
                mean += features_clean[[ci, y, x]];
            }
            mean *= inv_c;
            for ci in 0..c {
                let v = features_clean[[ci, y, x]];
                if v < mean {
                    below[[ci, y, x]] = F::one();
                } else if v > mean {
                    above[[ci, y, x]] = F::one();
                }
            }
        }
    }
    (below, above)
}

/// Support-contrast loss
/// `log(‖f_adv | clean < mean‖₂ + floor) − log(‖f_adv | clean > mean‖₂ + floor)`
/// — maximized, which promotes below-mean support and suppresses above-mean
/// support.
pub fn fda_loss<F: Scalar>(features_adv: &Array3<F>, features_clean: &Array3<F>) -> Result<F> {
    check_shapes("fda_loss", features_adv, features_clean)?;
    let (below, above) = fda_supports(features_clean);
    let masked_norm = |mask: &Array3<F>| -> F {
        let mut s = F::zero();
        ndarray::Zip::from(features_adv).and(mask).for_each(|&v, &m| {
            let x = v * m;
            s += x * x;
        });
        s.sqrt()
    };
    let floor = F::from_f64_lossy(SUPPORT_LOG_FLOOR);
    Ok((masked_norm(&below) + floor).ln() - (masked_norm(&above) + floor).ln())
}

/// Ablation variants of the feature objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AblationVariant {
    /// `Σ |f_clean − f_adv|` — divergence without gradient guidance.
    L1,
    /// `Σ (Δ_clean ⊙ (f_clean − f_adv))` — raw clean-image gradient weights.
    L2,
    /// `Σ (Δ ⊙ (f_clean − f_adv))` — aggregate-gradient weights.
    L3,
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AblationVariant::L1 => write!(f, "L1"),
            AblationVariant::L2 => write!(f, "L2"),
            AblationVariant::L3 => write!(f, "L3"),
        }
    }
}

/// Ablation loss value (natural sign, maximized by the attack).
pub fn ablation_loss<F: Scalar>(
    variant: AblationVariant,
    weights: Option<&Array3<F>>,
    features_clean: &Array3<F>,
    features_adv: &Array3<F>,
) -> Result<F> {
    check_shapes("ablation_loss", features_clean, features_adv)?;
    match variant {
        AblationVariant::L1 => {
            let mut s = F::zero();
            ndarray::Zip::from(features_clean)
                .and(features_adv)
                .for_each(|&c, &a| s += (c - a).abs());
            Ok(s)
        }
        AblationVariant::L2 | AblationVariant::L3 => {
            let w = weights.ok_or_else(|| {
                Error::Contract("weighted ablation variants need a weight map".into())
            })?;
            check_shapes("ablation_loss weights", w, features_clean)?;
            let mut s = F::zero();
            ndarray::Zip::from(w)
                .and(features_clean)
                .and(features_adv)
                .for_each(|&wv, &c, &a| s += wv * (c - a));
            Ok(s)
        }
    }
}

/// Minimization wrapper for the importance-weighted loss: the optimizer
/// minimizes `Σ Δ ⊙ f` directly.
pub fn fia_scalar_loss<F: Scalar>(tap: &str, delta: Array3<F>) -> ScalarLoss<F> {
    ScalarLoss::WeightedFeatureSum {
        tap: tap.to_string(),
        weights: delta,
        offset: F::zero(),
    }
}

/// Minimization wrapper for an ablation variant. For L2/L3 the maximized
/// loss `Σ w ⊙ (f_clean − f_adv)` becomes
/// `Σ w ⊙ f_adv − Σ w ⊙ f_clean` (same gradient as the importance-weighted
/// loss, shifted by a constant).
pub fn ablation_scalar_loss<F: Scalar>(
    variant: AblationVariant,
    tap: &str,
    weights: Option<Array3<F>>,
    features_clean: &Array3<F>,
) -> Result<ScalarLoss<F>> {
    match variant {
        AblationVariant::L1 => Ok(ScalarLoss::NegAbsDiff {
            tap: tap.to_string(),
            reference: features_clean.clone(),
        }),
        AblationVariant::L2 | AblationVariant::L3 => {
            let w = weights.ok_or_else(|| {
                Error::Contract("weighted ablation variants need a weight map".into())
            })?;
            let mut offset = F::zero();
            ndarray::Zip::from(&w)
                .and(features_clean)
                .for_each(|&wv, &c| offset -= wv * c);
            Ok(ScalarLoss::WeightedFeatureSum {
                tap: tap.to_string(),
                weights: w,
                offset,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featimp::AggregationConfig;
    use crate::rng::{normal_f64, RngSeed};
    use approx::assert_relative_eq;

    fn agg(values: Array3<f64>) -> AggregateGradient<f64> {
        AggregateGradient {
            values,
            source_config: AggregationConfig::new(0.0, 1, "t").unwrap(),
        }
    }

    #[test]
    fn fia_loss_trivial_and_oracle_cases() {
        let zeros = agg(Array3::zeros((1, 1, 2)));
        let f = Array3::from_shape_vec((1, 1, 2), vec![2.0, 3.0]).unwrap();
        assert_eq!(fia_loss(&zeros, &f).unwrap(), 0.0);

        let d = agg(Array3::from_shape_vec((1, 1, 2), vec![1.0, -1.0]).unwrap());
        assert_eq!(fia_loss(&d, &f).unwrap(), -1.0);

        let mut rng = RngSeed(1).rng();
        let mut dv = Array3::<f64>::zeros((4, 3, 3));
        let mut fv = Array3::<f64>::zeros((4, 3, 3));
        dv.iter_mut().for_each(|v| *v = normal_f64(&mut rng));
        fv.iter_mut().for_each(|v| *v = normal_f64(&mut rng));
        let mut expect = 0.0;
        for c in 0..4 {
            for y in 0..3 {
                for x in 0..3 {
                    expect += dv[[c, y, x]] * fv[[c, y, x]];
                }
            }
        }
        assert_relative_eq!(fia_loss(&agg(dv), &fv).unwrap(), expect, max_relative = 1e-12);
    }

    #[test]
    fn nrdm_loss_trivial_and_oracle_cases() {
        let a = Array3::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(nrdm_loss(&a, &a).unwrap(), 0.0);

        let mut b = a.clone();
        b[[0, 1, 1]] += 3.0;
        assert_eq!(nrdm_loss(&b, &a).unwrap(), 3.0);

        let mut rng = RngSeed(2).rng();
        let mut x = Array3::<f64>::zeros((2, 3, 3));
        let mut y = Array3::<f64>::zeros((2, 3, 3));
        x.iter_mut().for_each(|v| *v = normal_f64(&mut rng));
        y.iter_mut().for_each(|v| *v = normal_f64(&mut rng));
        let expect = x
            .iter()
            .zip(y.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert_relative_eq!(nrdm_loss(&x, &y).unwrap(), expect, max_relative = 1e-12);
    }

    #[test]
    fn fda_constant_features_give_zero_by_floor_convention() {
        let clean = Array3::from_elem((3, 2, 2), 1.5);
        let adv = Array3::from_elem((3, 2, 2), 7.0);
        assert_eq!(fda_loss(&adv, &clean).unwrap(), 0.0);
    }

    #[test]
    fn fda_matches_hand_computation_on_two_channel_map() {
        // Channel means: position (0,0): (1+3)/2 = 2, so c0 below, c1 above.
        // Position (0,1): (5+5)/2 = 5, tie → neither support.
        let clean =
            Array3::from_shape_vec((2, 1, 2), vec![1.0, 5.0, 3.0, 5.0]).unwrap();
        let adv = Array3::from_shape_vec((2, 1, 2), vec![2.0, 9.0, 4.0, 9.0]).unwrap();
        let below_norm = 2.0f64; // only adv[0,0,0]
        let above_norm = 4.0f64; // only adv[1,0,0]
        let expect =
            (below_norm + SUPPORT_LOG_FLOOR).ln() - (above_norm + SUPPORT_LOG_FLOOR).ln();
        assert_relative_eq!(fda_loss(&adv, &clean).unwrap(), expect, max_relative = 1e-12);
    }

    #[test]
    fn fda_is_scale_invariant_in_the_adv_features() {
        let mut rng = RngSeed(3).rng();
        let mut clean = Array3::<f64>::zeros((3, 4, 4));
        let mut adv = Array3::<f64>::zeros((3, 4, 4));
        clean.iter_mut().for_each(|v| *v = normal_f64(&mut rng));
        adv.iter_mut().for_each(|v| *v = normal_f64(&mut rng));
        let base = fda_loss(&adv, &clean).unwrap();
        let doubled = fda_loss(&adv.mapv(|v| v * 2.0), &clean).unwrap();
        assert_relative_eq!(base, doubled, epsilon = 1e-9);
    }

    #[test]
    fn ablation_l1_is_zero_on_identical_features() {
        let f = Array3::from_elem((2, 2, 2), 3.0);
        assert_eq!(
            ablation_loss(AblationVariant::L1, None, &f, &f).unwrap(),
            0.0
        );
    }

    #[test]
    fn weighted_ablation_matches_loop_oracle() {
        let mut rng = RngSeed(4).rng();
        let mut w = Array3::<f64>::zeros((2, 2, 2));
        let mut c = Array3::<f64>::zeros((2, 2, 2));
        let mut a = Array3::<f64>::zeros((2, 2, 2));
        w.iter_mut().for_each(|v| *v = normal_f64(&mut rng));
        c.iter_mut().for_each(|v| *v = normal_f64(&mut rng));
        a.iter_mut().for_each(|v| *v = normal_f64(&mut rng));
        let expect: f64 = w
            .iter()
            .zip(c.iter().zip(a.iter()))
            .map(|(wv, (cv, av))| wv * (cv - av))
            .sum();
        assert_relative_eq!(
            ablation_loss(AblationVariant::L3, Some(&w), &c, &a).unwrap(),
            expect,
            max_relative = 1e-12
        );
    }
}
