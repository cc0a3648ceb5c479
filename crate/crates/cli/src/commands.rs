//! Subcommand implementations.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};

use fia_core::attacks::losses::AblationVariant;
use fia_core::attacks::TargetRegime;
use fia_core::featimp::{
    aggregate_gradient, gradient_heatmap, importance_heatmap, raw_gradient, AggregationConfig,
};
use fia_core::harness::{
    self, evaluate_success, format_percent, CellRecord, SweepAxis, TransferMatrix,
};
use fia_core::zoo::checkpoint;
use fia_core::zoo::dataset::Split;
use fia_core::zoo::train::{train_model, TrainConfig};
use fia_core::zoo::{ModelHandle, TrainingMode};

use crate::artifacts::{self, ImageRecord, ZooEntry, ZooManifest};
use crate::config::{AttackEntry, ExperimentConfig};
use crate::plot::{line_plot, Series};
use crate::pngio;

/// Trains (or reuses) every zoo checkpoint and writes accuracy sidecars.
pub fn cmd_train_zoo(cfg: &ExperimentConfig) -> Result<()> {
    cfg.echo()?;
    let dataset = artifacts::load_or_synthesize_dataset(cfg)?;
    let dir = cfg.checkpoints_dir();
    fs::create_dir_all(&dir)?;

    let mut manifest = ZooManifest {
        dataset_id: dataset.meta.dataset_id.clone(),
        models: Vec::new(),
    };
    let jobs: Vec<(String, TrainingMode, f64)> = cfg
        .zoo
        .archs
        .iter()
        .map(|a| (a.clone(), TrainingMode::Normal, cfg.zoo.train.accuracy_floor))
        .chain(cfg.zoo.adversarial_archs.iter().map(|a| {
            (
                a.clone(),
                TrainingMode::Adversarial,
                cfg.zoo.adversarial_accuracy_floor,
            )
        }))
        .collect();

    let mut floor_failures: Vec<String> = Vec::new();
    for (arch, mode, floor) in jobs {
        let seed = cfg
            .global_seed()
            .derive(&["train", &arch, &mode.to_string()]);
        let params_id = format!("{arch}-{mode}-s{}", seed.0);
        let handle: ModelHandle<f32>;
        if checkpoint::exists(&dir, &params_id) {
            handle = checkpoint::load(&dir, &params_id)?;
            println!(
                "{params_id}: cached (accuracy {:.3})",
                handle.clean_accuracy().unwrap_or(f64::NAN)
            );
        } else {
            let train_cfg = TrainConfig {
                accuracy_floor: floor,
                ..cfg.zoo.train.clone()
            };
            let t0 = std::time::Instant::now();
            match train_model::<f32>(&arch, &dataset, mode, seed, &train_cfg) {
                Ok(trained) => {
                    checkpoint::save(&trained, seed, &dataset.meta.dataset_id, &dir)?;
                    println!(
                        "{params_id}: trained, accuracy {:.3} ({:?})",
                        trained.clean_accuracy().unwrap(),
                        t0.elapsed()
                    );
                    handle = trained;
                }
                Err(err @ fia_core::Error::TrainingFailed { .. }) => {
                    // Report per model and keep training the rest.
                    println!("{params_id}: FAILED — {err}");
                    floor_failures.push(format!("{params_id}: {err}"));
                    continue;
                }
                Err(err) => return Err(err.into()),
            }
        }
        manifest.models.push(ZooEntry {
            params_id,
            arch_id: arch,
            training_mode: mode,
            clean_accuracy: handle.clean_accuracy().unwrap_or(f64::NAN),
            checkpoint_sha256: handle
                .checkpoint_hash()
                .map(str::to_string)
                .unwrap_or_else(|| checkpoint::params_hash(&handle).unwrap_or_default()),
            seed: seed.0,
        });
    }
    manifest.save(cfg)?;
    if !floor_failures.is_empty() {
        bail!(
            "{} checkpoint(s) missed the accuracy floor:\n  {}",
            floor_failures.len(),
            floor_failures.join("\n  ")
        );
    }
    Ok(())
}

fn source_models(cfg: &ExperimentConfig, filter: &Option<Vec<String>>) -> Result<Vec<ModelHandle<f32>>> {
    let all = cfg.normal_params_ids();
    let ids: Vec<String> = match filter
        .clone()
        .or_else(|| cfg.harness.sources.clone())
    {
        Some(archs) => archs
            .iter()
            .map(|sel| resolve_model_id(cfg, sel))
            .collect::<Result<_>>()?,
        None => all,
    };
    artifacts::load_models(cfg, &ids)
}

/// Accepts an architecture name or a full params id.
fn resolve_model_id(cfg: &ExperimentConfig, selector: &str) -> Result<String> {
    if selector.contains("-s") {
        return Ok(selector.to_string());
    }
    for id in cfg
        .normal_params_ids()
        .into_iter()
        .chain(cfg.adversarial_params_ids())
    {
        if id.starts_with(&format!("{selector}-normal")) {
            return Ok(id);
        }
    }
    for id in cfg.adversarial_params_ids() {
        if id.starts_with(&format!("{selector}-adversarial")) {
            return Ok(id);
        }
    }
    bail!("no zoo member matches `{selector}`")
}

/// Crafts adversarial sets for every configured attack and writes PNGs +
/// manifests.
pub fn cmd_attack(cfg: &ExperimentConfig, sources: &Option<Vec<String>>) -> Result<()> {
    cfg.echo()?;
    let dataset = artifacts::load_dataset(cfg)?;
    let models = source_models(cfg, sources)?;
    if cfg.attacks.is_empty() {
        bail!("config lists no [[attack] ] entries");
    }
    let slice = dataset.eval_slice(cfg.global_seed(), cfg.harness.eval_images);

    for source in &models {
        for entry in &cfg.attacks {
            let attack_cfg = entry.resolve(cfg.global_seed())?;
            let t0 = std::time::Instant::now();
            let set = harness::craft_set(
                source,
                &attack_cfg,
                &dataset,
                &slice,
                cfg.global_seed(),
                "attack",
            )?;
            let per_image: Vec<ImageRecord> = slice
                .iter()
                .enumerate()
                .map(|(pos, &idx)| ImageRecord {
                    test_index: idx,
                    file: format!("img_{idx:05}.png"),
                    label: set.labels[pos],
                    success_on_source: set.success_on_source[pos],
                    failure: set.failure_notes[pos].clone(),
                })
                .collect();
            let manifest = artifacts::write_crafted_set(
                cfg,
                &set,
                &attack_cfg,
                source,
                &slice,
                &per_image,
                &dataset.meta.dataset_id,
            )?;
            println!(
                "{} on {}: {} images, {} failures ({:?}) -> {}",
                set.attack_id,
                set.source_id,
                slice.len(),
                set.failures,
                t0.elapsed(),
                manifest.display()
            );
        }
    }
    Ok(())
}

/// Which trained models evaluation runs against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TargetSet {
    Normal,
    Defense,
    Both,
}

fn target_models(cfg: &ExperimentConfig, set: TargetSet) -> Result<Vec<ModelHandle<f32>>> {
    let ids: Vec<String> = match (set, &cfg.harness.targets) {
        (TargetSet::Normal, Some(sel)) => sel
            .iter()
            .map(|s| resolve_model_id(cfg, s))
            .collect::<Result<_>>()?,
        (TargetSet::Normal, None) => cfg.normal_params_ids(),
        (TargetSet::Defense, _) => cfg.adversarial_params_ids(),
        (TargetSet::Both, _) => cfg
            .normal_params_ids()
            .into_iter()
            .chain(cfg.adversarial_params_ids())
            .collect(),
    };
    artifacts::load_models(cfg, &ids)
}

/// Evaluates every crafted manifest against the chosen targets and writes
/// the transfer matrix (CSV + JSON) plus a printed table.
pub fn cmd_evaluate(cfg: &ExperimentConfig, target_set: TargetSet, tag: &str) -> Result<()> {
    cfg.echo()?;
    let dataset = artifacts::load_dataset(cfg)?;
    let targets = target_models(cfg, target_set)?;
    let manifests = artifacts::find_manifests(cfg)?;

    let mut cells: Vec<CellRecord> = Vec::new();
    let mut n_images = 0usize;
    for path in &manifests {
        let (manifest, adv) = artifacts::read_crafted_set(path)?;
        let indices: Vec<usize> = manifest.images.iter().map(|r| r.test_index).collect();
        let (clean, labels) = dataset.batch::<f32>(Split::Test, &indices);
        n_images = indices.len();
        let failures = manifest.images.iter().filter(|r| r.failure.is_some()).count();
        for target in &targets {
            let counts = evaluate_success(target, &adv, &clean, &labels)?;
            cells.push(CellRecord {
                source: manifest.source.clone(),
                attack: manifest.attack_id.clone(),
                target: target.params_id().to_string(),
                n: counts.n_clean_correct,
                successes: counts.successes,
                rate: counts.rate(),
                n_all: counts.n_all,
                successes_all: counts.successes_all,
                rate_all: counts.rate_all(),
                white_box: manifest.source == target.params_id(),
                failures,
            });
        }
    }
    let matrix = TransferMatrix {
        n_images,
        seed: cfg.seed,
        cells,
    };
    write_matrix(cfg, &matrix, tag)?;
    print_matrix(&matrix);
    Ok(())
}

pub fn write_matrix(cfg: &ExperimentConfig, matrix: &TransferMatrix, tag: &str) -> Result<()> {
    let dir = cfg.results_dir();
    fs::create_dir_all(&dir)?;
    artifacts::write_atomic(&dir.join(format!("{tag}.csv")), matrix.to_csv().as_bytes())?;
    artifacts::write_atomic(
        &dir.join(format!("{tag}.json")),
        serde_json::to_string_pretty(matrix)?.as_bytes(),
    )?;
    Ok(())
}

fn print_matrix(matrix: &TransferMatrix) {
    println!("source,attack,target,rate,white_box");
    for c in &matrix.cells {
        println!(
            "{},{},{},{},{}",
            c.source,
            c.attack,
            c.target,
            format_percent(c.rate),
            if c.white_box { "white-box" } else { "" }
        );
    }
    let mut attacks: Vec<&str> = matrix.cells.iter().map(|c| c.attack.as_str()).collect();
    attacks.sort_unstable();
    attacks.dedup();
    for a in attacks {
        if let Some(rate) = matrix.mean_transfer_rate(a) {
            println!("mean transfer {a}: {}", format_percent(rate));
        }
    }
}

/// Runs a hyperparameter sweep and writes CSV/JSON plus the line plot.
#[allow(clippy::too_many_arguments)]
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    source: &Option<String>,
    targets_flag: &Option<Vec<String>>,
    include_defense: bool,
) -> Result<()> {
    cfg.echo()?;
    let dataset = artifacts::load_dataset(cfg)?;
    let source_id = match source {
        Some(sel) => resolve_model_id(cfg, sel)?,
        None => cfg.normal_params_ids()[0].clone(),
    };
    let source = artifacts::load_models(cfg, &[source_id.clone()])?.remove(0);

    let mut target_ids: Vec<String> = match targets_flag {
        Some(sel) => sel
            .iter()
            .map(|s| resolve_model_id(cfg, s))
            .collect::<Result<_>>()?,
        None => cfg
            .normal_params_ids()
            .into_iter()
            .filter(|id| *id != source_id)
            .collect(),
    };
    if include_defense {
        target_ids.extend(cfg.adversarial_params_ids());
    }
    let targets = artifacts::load_models(cfg, &target_ids)?;

    let base = fia_entry(cfg).resolve(cfg.global_seed())?;
    let slice = dataset.eval_slice(cfg.global_seed(), cfg.harness.eval_images);
    let result = harness::run_sweep(
        axis,
        values,
        &base,
        &source,
        &targets,
        &dataset,
        &slice,
        cfg.global_seed(),
    )?;

    let dir = cfg.results_dir();
    fs::create_dir_all(&dir)?;
    let tag = format!("sweep_{axis}");
    let mut csv = String::from("axis,value,target,rate\n");
    for p in &result.points {
        for (target, rate) in &p.rates {
            csv.push_str(&format!("{axis},{},{target},{rate:.6}\n", p.value));
        }
    }
    artifacts::write_atomic(&dir.join(format!("{tag}.csv")), csv.as_bytes())?;
    artifacts::write_atomic(
        &dir.join(format!("{tag}.json")),
        serde_json::to_string_pretty(&result)?.as_bytes(),
    )?;

    fs::create_dir_all(cfg.plots_dir())?;
    let mut series: Vec<Series> = targets
        .iter()
        .map(|t| Series {
            label: t.params_id().chars().take(18).collect(),
            points: result
                .points
                .iter()
                .map(|p| {
                    let rate = p
                        .rates
                        .iter()
                        .find(|(id, _)| id == t.params_id())
                        .map(|(_, r)| *r)
                        .unwrap_or(0.0);
                    (p.value, rate)
                })
                .collect(),
        })
        .collect();
    series.push(Series {
        label: "mean".into(),
        points: result
            .points
            .iter()
            .map(|p| (p.value, p.mean_rate()))
            .collect(),
    });
    line_plot(
        &series,
        &axis.to_string(),
        &cfg.plots_dir().join(format!("{tag}.png")),
    )?;

    for p in &result.points {
        println!(
            "{axis}={}: mean {}",
            p.value,
            format_percent(p.mean_rate())
        );
    }
    Ok(())
}

/// The FIA entry from the config, falling back to the §-default preset.
fn fia_entry(cfg: &ExperimentConfig) -> AttackEntry {
    cfg.attacks
        .iter()
        .find(|a| a.preset == "FIA")
        .cloned()
        .unwrap_or_else(|| AttackEntry::named("FIA", TargetRegime::Normal))
}

/// Runs the L1/L2/L3 ablation and writes its matrix.
pub fn cmd_ablate(cfg: &ExperimentConfig, sources: &Option<Vec<String>>) -> Result<()> {
    cfg.echo()?;
    let dataset = artifacts::load_dataset(cfg)?;
    let source_ids: Vec<String> = match sources {
        Some(sel) => sel
            .iter()
            .map(|s| resolve_model_id(cfg, s))
            .collect::<Result<_>>()?,
        None => cfg.normal_params_ids().into_iter().take(2).collect(),
    };
    let sources = artifacts::load_models(cfg, &source_ids)?;
    let targets = target_models(cfg, TargetSet::Normal)?;
    let base = fia_entry(cfg).resolve(cfg.global_seed())?;
    let slice = dataset.eval_slice(cfg.global_seed(), cfg.harness.eval_images);

    let matrix = harness::run_ablation(
        &[AblationVariant::L1, AblationVariant::L2, AblationVariant::L3],
        &base,
        &sources,
        &targets,
        &dataset,
        &slice,
        cfg.global_seed(),
    )?;
    write_matrix(cfg, &matrix, "ablation")?;
    print_matrix(&matrix);
    Ok(())
}

/// Writes raw-gradient and aggregate-gradient heatmaps plus a feature-map
/// montage for one test image.
pub fn cmd_visualize(
    cfg: &ExperimentConfig,
    image_index: usize,
    model_sel: &Option<String>,
    tap_flag: &Option<String>,
    drop_prob: f64,
    ensemble_number: usize,
) -> Result<()> {
    cfg.echo()?;
    let dataset = artifacts::load_dataset(cfg)?;
    if image_index >= dataset.len(Split::Test) {
        bail!(
            "image index {image_index} outside the test split (0..{})",
            dataset.len(Split::Test)
        );
    }
    let model_id = match model_sel {
        Some(sel) => resolve_model_id(cfg, sel)?,
        None => cfg.normal_params_ids()[0].clone(),
    };
    let model = artifacts::load_models(cfg, &[model_id.clone()])?.remove(0);
    let tap = tap_flag
        .clone()
        .unwrap_or_else(|| model.default_tap().to_string());
    let example = dataset.example::<f32>(Split::Test, image_index);

    let features = model.features_at(&example.image, &tap)?;
    let (_, c, h, w) = features.values.dim();
    let f3 = features
        .values
        .clone()
        .into_shape_with_order((c, h, w))
        .unwrap();

    let raw = raw_gradient(&model, &example, &tap)?;
    let raw3 = raw.values.into_shape_with_order((c, h, w)).unwrap();
    let raw_map = gradient_heatmap(&raw3, &f3)?;

    let agg_cfg = AggregationConfig {
        drop_prob,
        ensemble_number,
        tap: tap.clone(),
        per_element_mask: false,
    };
    let mut rng = cfg
        .global_seed()
        .derive(&["visualize", &model_id, &image_index.to_string()])
        .rng();
    let agg = aggregate_gradient(&model, &example, &agg_cfg, &mut rng)?;
    let agg_map = importance_heatmap(&agg, &f3)?;

    fs::create_dir_all(cfg.plots_dir())?;
    let stem = format!("viz_{model_id}_{tap}_img{image_index:05}");
    let raw_path = cfg.plots_dir().join(format!("{stem}_raw.png"));
    let agg_path = cfg.plots_dir().join(format!("{stem}_aggregate.png"));
    let feat_path = cfg.plots_dir().join(format!("{stem}_features.png"));
    pngio::write_heatmap_png(&raw_map, &raw_path)?;
    pngio::write_heatmap_png(&agg_map, &agg_path)?;
    pngio::write_montage_png(&f3, &feat_path)?;
    println!("{}", raw_path.display());
    println!("{}", agg_path.display());
    println!("{}", feat_path.display());
    Ok(())
}

/// Budget verification summary, serialized to stdout.
#[derive(Debug, serde::Serialize)]
pub struct VerifyReport {
    pub manifests: usize,
    pub images_checked: usize,
    pub violations: Vec<String>,
}

/// Re-checks every exported adversarial image against its manifest's budget
/// by reading the files back: ℓ∞ distance to the clean image and value-range
/// containment, with no tolerance.
pub fn cmd_verify_budget(cfg: &ExperimentConfig, manifest: &Option<PathBuf>) -> Result<VerifyReport> {
    let dataset = artifacts::load_dataset(cfg)?;
    let manifests = match manifest {
        Some(path) => vec![path.clone()],
        None => artifacts::find_manifests(cfg)?,
    };
    if manifests.is_empty() {
        bail!(
            "no attack manifests under {} — run `fia attack` first",
            cfg.adversarials_dir().display()
        );
    }
    let mut report = VerifyReport {
        manifests: manifests.len(),
        images_checked: 0,
        violations: Vec::new(),
    };
    for path in &manifests {
        let manifest: artifacts::AttackManifest = serde_json::from_slice(
            &fs::read(path).with_context(|| format!("reading {}", path.display()))?,
        )?;
        let eps = manifest.config_echo.budget.epsilon as f64;
        let dir = path.parent().unwrap();
        let shape = (
            manifest.image_shape[0],
            manifest.image_shape[1],
            manifest.image_shape[2],
        );
        for rec in &manifest.images {
            let adv = pngio::read_image_png(&dir.join(&rec.file), shape)?;
            let clean = dataset.raw_image(Split::Test, rec.test_index);
            if adv.len() != clean.len() {
                report
                    .violations
                    .push(format!("{}: size mismatch", rec.file));
                continue;
            }
            let linf = adv
                .iter()
                .zip(clean)
                .map(|(&a, &c)| (a as i32 - c as i32).abs())
                .max()
                .unwrap_or(0);
            if linf as f64 > eps {
                report.violations.push(format!(
                    "{}/{}/{}: linf {} > epsilon {}",
                    manifest.source, manifest.attack_id, rec.file, linf, eps
                ));
            }
            report.images_checked += 1;
        }
    }
    Ok(report)
}
