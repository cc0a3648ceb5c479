//! Experiment orchestration: transfer matrices, hyperparameter sweeps, and
//! the ablation study.
//!
//! One crafted set per (source, attack) is evaluated against every target,
//! matching the tables' protocol (rows craft once, columns evaluate).
//! Adversarials are quantized onto the 8-bit export grid before target
//! evaluation, so in-memory results match the file-based pipeline exactly.
//! Every per-image job owns a seed derived from the experiment seed and the
//! job coordinates, so matrices are deterministic and cells are independent.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::attacks::{losses::AblationVariant, run_ablation_variant, run_attack, AttackConfig};
use crate::error::{Error, Result};
use crate::image::{batch_from_u8, quantize_to_export, ImageBatch};
use crate::rng::RngSeed;
use crate::scalar::Scalar;
use crate::zoo::dataset::{Dataset, Split};
use crate::zoo::ModelHandle;

/// One evaluated (source, attack, target) cell.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CellRecord {
    pub source: String,
    pub attack: String,
    pub target: String,
    /// Clean-correct denominator.
    pub n: usize,
    pub successes: usize,
    /// Headline success rate over the clean-correct subset.
    pub rate: f64,
    /// All-images denominator and rate, reported alongside.
    pub n_all: usize,
    pub successes_all: usize,
    pub rate_all: f64,
    pub white_box: bool,
    /// Attack runs that could not be completed (recorded, never dropped).
    pub failures: usize,
}

/// Success rates for every (source, attack, target) triple of an experiment.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TransferMatrix {
    pub n_images: usize,
    pub seed: u64,
    pub cells: Vec<CellRecord>,
}

impl TransferMatrix {
    pub fn get(&self, source: &str, attack: &str, target: &str) -> Option<&CellRecord> {
        self.cells
            .iter()
            .find(|c| c.source == source && c.attack == attack && c.target == target)
    }

    /// Mean success rate of an attack over all cross-model (non-white-box)
    /// cells.
    pub fn mean_transfer_rate(&self, attack: &str) -> Option<f64> {
        let rates: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.attack == attack && !c.white_box)
            .map(|c| c.rate)
            .collect();
        if rates.is_empty() {
            None
        } else {
            Some(rates.iter().sum::<f64>() / rates.len() as f64)
        }
    }

    /// CSV with one row per cell: source, attack, target, n, successes,
    /// rate, white_box.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source,attack,target,n,successes,rate,white_box\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{}\n",
                c.source, c.attack, c.target, c.n, c.successes, c.rate, c.white_box
            ));
        }
        out
    }
}

/// Renders a success rate the way the tables print it: `0.835` → `83.5%`.
pub fn format_percent(rate: f64) -> String {
    format!("{:.1}%", rate * 100.0)
}

/// One crafted adversarial set: all slice images attacked by one config on
/// one source, quantized to the export grid.
#[derive(Debug, Clone)]
pub struct CraftedSet<F: Scalar> {
    pub source_id: String,
    pub attack_id: String,
    pub adversarial: ImageBatch<F>,
    pub clean: ImageBatch<F>,
    pub labels: Vec<usize>,
    pub failures: usize,
    /// Per-image failure reason, aligned with the slice.
    pub failure_notes: Vec<Option<String>>,
    /// Per-image success on the source model (float-precision, pre-export).
    pub success_on_source: Vec<bool>,
}

/// Crafts adversarials for every slice image. Each image's run derives its
/// seed from `seed` and the (context, source, image-index) coordinates.
pub fn craft_set<F: Scalar>(
    source: &ModelHandle<F>,
    cfg: &AttackConfig<F>,
    dataset: &Dataset,
    slice: &[usize],
    seed: RngSeed,
    seed_context: &str,
) -> Result<CraftedSet<F>> {
    let attack_id = cfg.name();
    let (clean, labels) = dataset.batch::<F>(Split::Test, slice);
    let (c, h, w) = clean.image_shape();
    let mut adv_data = Array4::zeros((slice.len(), c, h, w));
    let mut failures = 0usize;
    let mut failure_notes = Vec::with_capacity(slice.len());
    let mut success_on_source = Vec::with_capacity(slice.len());

    for (pos, &idx) in slice.iter().enumerate() {
        let example = dataset.example::<F>(Split::Test, idx);
        let mut icfg = cfg.clone();
        icfg.seed = seed.derive(&[
            seed_context,
            source.params_id(),
            &attack_id,
            &idx.to_string(),
        ]);
        let result = run_attack(source, &example, &icfg)?;
        if result.failure.is_some() {
            failures += 1;
        }
        failure_notes.push(result.failure.clone());
        success_on_source.push(result.success_on_source);
        let bytes = quantize_to_export(&result.adversarial, &example.image, cfg.budget)?;
        let quant: ImageBatch<F> = batch_from_u8(&bytes, (1, c, h, w))?;
        adv_data
            .index_axis_mut(ndarray::Axis(0), pos)
            .assign(&quant.data().index_axis(ndarray::Axis(0), 0));
    }

    Ok(CraftedSet {
        source_id: source.params_id().to_string(),
        attack_id,
        adversarial: ImageBatch::new_default_range(adv_data)?,
        clean,
        labels,
        failures,
        failure_notes,
        success_on_source,
    })
}

/// Predicted labels in evaluation-sized chunks.
pub fn predict_labels<F: Scalar>(
    model: &ModelHandle<F>,
    images: &ImageBatch<F>,
) -> Result<Vec<usize>> {
    let n = images.batch_len();
    let chunk = 128;
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        let j = (i + chunk).min(n);
        let view = images
            .data()
            .slice(ndarray::s![i..j, .., .., ..])
            .to_owned();
        let batch = ImageBatch::from_unclamped(view, images.value_range());
        out.extend(model.forward(&batch)?.predicted_labels);
        i = j;
    }
    Ok(out)
}

/// Success evaluation of one crafted set against one target.
#[derive(Debug, Clone, Copy)]
pub struct SuccessCounts {
    pub n_clean_correct: usize,
    pub successes: usize,
    pub n_all: usize,
    pub successes_all: usize,
}

impl SuccessCounts {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.n_clean_correct as f64
    }
    pub fn rate_all(&self) -> f64 {
        self.successes_all as f64 / self.n_all as f64
    }
}

/// Fraction of images misclassified by the target, over the subset the
/// target classifies correctly when clean. Errors when that subset is empty.
pub fn evaluate_success<F: Scalar>(
    target: &ModelHandle<F>,
    adversarial: &ImageBatch<F>,
    clean: &ImageBatch<F>,
    labels: &[usize],
) -> Result<SuccessCounts> {
    let clean_pred = predict_labels(target, clean)?;
    let adv_pred = predict_labels(target, adversarial)?;
    let mut counts = SuccessCounts {
        n_clean_correct: 0,
        successes: 0,
        n_all: labels.len(),
        successes_all: 0,
    };
    for i in 0..labels.len() {
        let fooled = adv_pred[i] != labels[i];
        if fooled {
            counts.successes_all += 1;
        }
        if clean_pred[i] == labels[i] {
            counts.n_clean_correct += 1;
            if fooled {
                counts.successes += 1;
            }
        }
    }
    if counts.n_clean_correct == 0 {
        return Err(Error::UndefinedRate);
    }
    Ok(counts)
}

/// Crafts every (source, attack) set and evaluates it against every target.
pub fn run_transfer_matrix<F: Scalar>(
    sources: &[ModelHandle<F>],
    attacks: &[AttackConfig<F>],
    targets: &[ModelHandle<F>],
    dataset: &Dataset,
    slice: &[usize],
    seed: RngSeed,
) -> Result<TransferMatrix> {
    let mut cells = Vec::new();
    for source in sources {
        for cfg in attacks {
            let set = craft_set(source, cfg, dataset, slice, seed, "attack")?;
            for target in targets {
                let counts = evaluate_success(target, &set.adversarial, &set.clean, &set.labels)?;
                cells.push(CellRecord {
                    source: set.source_id.clone(),
                    attack: set.attack_id.clone(),
                    target: target.params_id().to_string(),
                    n: counts.n_clean_correct,
                    successes: counts.successes,
                    rate: counts.rate(),
                    n_all: counts.n_all,
                    successes_all: counts.successes_all,
                    rate_all: counts.rate_all(),
                    white_box: source.params_id() == target.params_id(),
                    failures: set.failures,
                });
            }
        }
    }
    Ok(TransferMatrix {
        n_images: slice.len(),
        seed: seed.0,
        cells,
    })
}

/// Swept hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    DropProb,
    EnsembleNumber,
    Layer,
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepAxis::DropProb => write!(f, "drop_prob"),
            SweepAxis::EnsembleNumber => write!(f, "ensemble_number"),
            SweepAxis::Layer => write!(f, "layer"),
        }
    }
}

/// One sweep point: the axis value and the success rate per target.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    /// `(target_id, clean-correct success rate)` in target order.
    pub rates: Vec<(String, f64)>,
}

impl SweepPoint {
    pub fn mean_rate(&self) -> f64 {
        self.rates.iter().map(|(_, r)| r).sum::<f64>() / self.rates.len() as f64
    }
}

/// Transfer success along one swept hyperparameter, all else fixed
/// (including per-image seeds).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub source: String,
    pub n_images: usize,
    pub seed: u64,
    pub points: Vec<SweepPoint>,
}

/// Runs one transfer evaluation per axis value. Axis values must be strictly
/// increasing. Per-image seeds are derived without the axis value, so only
/// the swept parameter changes between points.
pub fn run_sweep<F: Scalar>(
    axis: SweepAxis,
    values: &[f64],
    base_cfg: &AttackConfig<F>,
    source: &ModelHandle<F>,
    targets: &[ModelHandle<F>],
    dataset: &Dataset,
    slice: &[usize],
    seed: RngSeed,
) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::Parameter("sweep needs at least one value".into()));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter(
            "sweep values must be strictly increasing".into(),
        ));
    }
    let mut points = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base_cfg.clone();
        match axis {
            SweepAxis::DropProb => {
                let mut agg = cfg.resolved_aggregation("");
                agg.drop_prob = value;
                agg.tap = String::new();
                cfg.aggregation = Some(agg);
                if !(0.0..1.0).contains(&value) {
                    return Err(Error::Parameter(format!(
                        "drop_prob {value} outside [0, 1)"
                    )));
                }
            }
            SweepAxis::EnsembleNumber => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Parameter(format!(
                        "ensemble_number {value} must be a positive integer"
                    )));
                }
                let mut agg = cfg.resolved_aggregation("");
                agg.ensemble_number = value as usize;
                agg.tap = String::new();
                cfg.aggregation = Some(agg);
            }
            SweepAxis::Layer => {
                let idx = value as usize;
                if value.fract() != 0.0 || idx >= source.taps().len() {
                    return Err(Error::Parameter(format!(
                        "layer index {value} outside the tap list"
                    )));
                }
                cfg.tap = Some(source.taps()[idx].clone());
            }
        }
        // Seed context deliberately omits the attack name and axis value so
        // every point shares its per-image streams.
        let set = craft_one_axis_point(source, &cfg, dataset, slice, seed)?;
        let mut rates = Vec::with_capacity(targets.len());
        for target in targets {
            let counts = evaluate_success(target, &set.adversarial, &set.clean, &set.labels)?;
            rates.push((target.params_id().to_string(), counts.rate()));
        }
        points.push(SweepPoint { value, rates });
    }
    Ok(SweepResult {
        axis,
        source: source.params_id().to_string(),
        n_images: slice.len(),
        seed: seed.0,
        points,
    })
}

fn craft_one_axis_point<F: Scalar>(
    source: &ModelHandle<F>,
    cfg: &AttackConfig<F>,
    dataset: &Dataset,
    slice: &[usize],
    seed: RngSeed,
) -> Result<CraftedSet<F>> {
    let (clean, labels) = dataset.batch::<F>(Split::Test, slice);
    let (c, h, w) = clean.image_shape();
    let mut adv_data = Array4::zeros((slice.len(), c, h, w));
    let mut failures = 0usize;
    let mut failure_notes = Vec::with_capacity(slice.len());
    let mut success_on_source = Vec::with_capacity(slice.len());
    for (pos, &idx) in slice.iter().enumerate() {
        let example = dataset.example::<F>(Split::Test, idx);
        let mut icfg = cfg.clone();
        icfg.seed = seed.derive(&["sweep", source.params_id(), &idx.to_string()]);
        let result = run_attack(source, &example, &icfg)?;
        if result.failure.is_some() {
            failures += 1;
        }
        failure_notes.push(result.failure.clone());
        success_on_source.push(result.success_on_source);
        let bytes = quantize_to_export(&result.adversarial, &example.image, cfg.budget)?;
        let quant: ImageBatch<F> = batch_from_u8(&bytes, (1, c, h, w))?;
        adv_data
            .index_axis_mut(ndarray::Axis(0), pos)
            .assign(&quant.data().index_axis(ndarray::Axis(0), 0));
    }
    Ok(CraftedSet {
        source_id: source.params_id().to_string(),
        attack_id: cfg.name(),
        adversarial: ImageBatch::new_default_range(adv_data)?,
        clean,
        labels,
        failures,
        failure_notes,
        success_on_source,
    })
}

/// Ablation selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub variant: AblationVariant,
}

/// Runs the three ablation objectives with identical optimizer, budget,
/// tap, and per-image seeds (the seed context omits the variant), returning
/// a matrix keyed by attack ids `L1`, `L2`, `L3`.
pub fn run_ablation<F: Scalar>(
    variants: &[AblationVariant],
    base_cfg: &AttackConfig<F>,
    sources: &[ModelHandle<F>],
    targets: &[ModelHandle<F>],
    dataset: &Dataset,
    slice: &[usize],
    seed: RngSeed,
) -> Result<TransferMatrix> {
    let (clean, labels) = dataset.batch::<F>(Split::Test, slice);
    let (c, h, w) = clean.image_shape();
    let mut cells = Vec::new();
    for source in sources {
        for &variant in variants {
            let mut adv_data = Array4::zeros((slice.len(), c, h, w));
            let mut failures = 0usize;
            for (pos, &idx) in slice.iter().enumerate() {
                let example = dataset.example::<F>(Split::Test, idx);
                let mut icfg = base_cfg.clone();
                icfg.seed = seed.derive(&["ablate", source.params_id(), &idx.to_string()]);
                let result = run_ablation_variant(source, &example, &icfg, variant)?;
                if result.failure.is_some() {
                    failures += 1;
                }
                let bytes =
                    quantize_to_export(&result.adversarial, &example.image, base_cfg.budget)?;
                let quant: ImageBatch<F> = batch_from_u8(&bytes, (1, c, h, w))?;
                adv_data
                    .index_axis_mut(ndarray::Axis(0), pos)
                    .assign(&quant.data().index_axis(ndarray::Axis(0), 0));
            }
            let adversarial = ImageBatch::new_default_range(adv_data)?;
            for target in targets {
                let counts = evaluate_success(target, &adversarial, &clean, &labels)?;
                cells.push(CellRecord {
                    source: source.params_id().to_string(),
                    attack: variant.to_string(),
                    target: target.params_id().to_string(),
                    n: counts.n_clean_correct,
                    successes: counts.successes,
                    rate: counts.rate(),
                    n_all: counts.n_all,
                    successes_all: counts.successes_all,
                    rate_all: counts.rate_all(),
                    white_box: source.params_id() == target.params_id(),
                    failures,
                });
            }
        }
    }
    Ok(TransferMatrix {
        n_images: slice.len(),
        seed: seed.0,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percent_formatting_matches_table_style() {
        assert_eq!(format_percent(0.835), "83.5%");
        assert_eq!(format_percent(1.0), "100.0%");
        assert_eq!(format_percent(0.0), "0.0%");
    }

    #[test]
    fn csv_has_spec_columns() {
        let m = TransferMatrix {
            n_images: 3,
            seed: 7,
            cells: vec![CellRecord {
                source: "a".into(),
                attack: "MIM".into(),
                target: "b".into(),
                n: 3,
                successes: 2,
                rate: 2.0 / 3.0,
                n_all: 3,
                successes_all: 2,
                rate_all: 2.0 / 3.0,
                white_box: false,
                failures: 0,
            }],
        };
        let csv = m.to_csv();
        assert!(csv.starts_with("source,attack,target,n,successes,rate,white_box\n"));
        assert!(csv.contains("a,MIM,b,3,2,0.666667,false"));
    }
}
