//! On-disk artifact layout and manifests.
//!
//! ```text
//! <output_dir>/
//!   config.toml                  effective config echo
//!   dataset/                     packed dataset (json + bin)
//!   checkpoints/                 *.bin + *.json sidecars, manifest.json
//!   adversarials/<source>/<attack>/img_XXXXX.png + manifest.json
//!   results/                     *.csv + *.json
//!   plots/                       *.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use fia_core::attacks::AttackConfig;
use fia_core::harness::CraftedSet;
use fia_core::zoo::checkpoint;
use fia_core::zoo::dataset::Dataset;
use fia_core::zoo::{ModelHandle, TrainingMode};

use crate::config::ExperimentConfig;
use crate::pngio;

/// Summary of one trained checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZooEntry {
    pub params_id: String,
    pub arch_id: String,
    pub training_mode: TrainingMode,
    pub clean_accuracy: f64,
    pub checkpoint_sha256: String,
    pub seed: u64,
}

/// Index of the trained zoo, written by `train-zoo`.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ZooManifest {
    pub dataset_id: String,
    pub models: Vec<ZooEntry>,
}

impl ZooManifest {
    pub fn path(cfg: &ExperimentConfig) -> PathBuf {
        cfg.checkpoints_dir().join("manifest.json")
    }

    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let path = Self::path(cfg);
        let text = fs::read(&path).with_context(|| {
            format!(
                "no zoo manifest at {} — run `fia train-zoo` first",
                path.display()
            )
        })?;
        Ok(serde_json::from_slice(&text)?)
    }

    pub fn save(&self, cfg: &ExperimentConfig) -> Result<()> {
        write_atomic(
            &Self::path(cfg),
            serde_json::to_string_pretty(self)?.as_bytes(),
        )
    }
}

/// One adversarial image record inside an attack manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub test_index: usize,
    pub file: String,
    pub label: usize,
    pub success_on_source: bool,
    pub failure: Option<String>,
}

/// Manifest written next to one crafted adversarial set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackManifest {
    pub attack_id: String,
    pub source: String,
    pub source_checkpoint_sha256: String,
    pub dataset_id: String,
    pub global_seed: u64,
    pub seed_context: String,
    pub config_echo: AttackConfig<f32>,
    pub image_shape: [usize; 3],
    pub images: Vec<ImageRecord>,
}

/// Atomic write: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().context("artifact path has no parent")?;
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().unwrap().to_string_lossy()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads the dataset, synthesizing it first when configured to.
pub fn load_or_synthesize_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dir = cfg.dataset_dir();
    if dir.join("dataset.json").exists() {
        return Ok(Dataset::load(&dir)?);
    }
    if !cfg.dataset.synthesize {
        bail!(
            "dataset not found at {} and dataset.synthesize = false — \
             point dataset.path at a packed dataset or enable synthesis",
            dir.display()
        );
    }
    let data = Dataset::generate(
        cfg.global_seed().derive(&["dataset"]),
        cfg.dataset.n_train,
        cfg.dataset.n_test,
    );
    data.save(&dir)?;
    Ok(data)
}

/// Loads the dataset, failing when absent (read-only commands).
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dir = cfg.dataset_dir();
    if !dir.join("dataset.json").exists() {
        bail!(
            "dataset not found at {} — run `fia train-zoo` first",
            dir.display()
        );
    }
    Ok(Dataset::load(&dir)?)
}

/// Loads a set of checkpoints by params id.
pub fn load_models(cfg: &ExperimentConfig, ids: &[String]) -> Result<Vec<ModelHandle<f32>>> {
    let dir = cfg.checkpoints_dir();
    ids.iter()
        .map(|id| {
            checkpoint::load::<f32>(&dir, id).with_context(|| {
                format!(
                    "loading checkpoint `{id}` from {} — run `fia train-zoo` first",
                    dir.display()
                )
            })
        })
        .collect()
}

/// Directory holding one crafted set.
pub fn attack_dir(cfg: &ExperimentConfig, source: &str, attack: &str) -> PathBuf {
    cfg.adversarials_dir().join(source).join(attack)
}

/// Writes a crafted set as PNGs + manifest; returns the manifest path.
pub fn write_crafted_set(
    cfg: &ExperimentConfig,
    set: &CraftedSet<f32>,
    attack_cfg: &AttackConfig<f32>,
    source: &ModelHandle<f32>,
    slice: &[usize],
    per_image: &[ImageRecord],
    dataset_id: &str,
) -> Result<PathBuf> {
    let dir = attack_dir(cfg, &set.source_id, &set.attack_id);
    fs::create_dir_all(&dir)?;
    for (pos, rec) in per_image.iter().enumerate() {
        debug_assert_eq!(rec.test_index, slice[pos]);
        pngio::write_image_png(&set.adversarial, pos, &dir.join(&rec.file))?;
    }
    let (c, h, w) = set.adversarial.image_shape();
    let manifest = AttackManifest {
        attack_id: set.attack_id.clone(),
        source: set.source_id.clone(),
        source_checkpoint_sha256: source.checkpoint_hash().unwrap_or("unsaved").to_string(),
        dataset_id: dataset_id.to_string(),
        global_seed: cfg.seed,
        seed_context: "attack".into(),
        config_echo: attack_cfg.clone(),
        image_shape: [c, h, w],
        images: per_image.to_vec(),
    };
    let path = dir.join("manifest.json");
    write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

/// Finds every attack manifest under `adversarials/`.
pub fn find_manifests(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let root = cfg.adversarials_dir();
    let mut out = Vec::new();
    if !root.exists() {
        return Ok(out);
    }
    for source_entry in sorted_dirs(&root)? {
        for attack_entry in sorted_dirs(&source_entry)? {
            let manifest = attack_entry.join("manifest.json");
            if manifest.exists() {
                out.push(manifest);
            }
        }
    }
    Ok(out)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

/// Reads a manifest and its adversarial images back into a batch.
pub fn read_crafted_set(
    manifest_path: &Path,
) -> Result<(AttackManifest, fia_core::image::ImageBatch<f32>)> {
    let manifest: AttackManifest = serde_json::from_slice(
        &fs::read(manifest_path)
            .with_context(|| format!("reading {}", manifest_path.display()))?,
    )?;
    let dir = manifest_path.parent().unwrap();
    let shape = (
        manifest.image_shape[0],
        manifest.image_shape[1],
        manifest.image_shape[2],
    );
    let mut raws = Vec::with_capacity(manifest.images.len());
    for rec in &manifest.images {
        raws.push(pngio::read_image_png(&dir.join(&rec.file), shape)?);
    }
    let batch = pngio::batch_from_many(&raws, shape)?;
    Ok((manifest, batch))
}
