//! Experiment configuration: one TOML file per experiment, flag overrides,
//! and an effective-config echo into the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use fia_core::attacks::{preset, AttackConfig, TargetRegime};
use fia_core::rng::RngSeed;
use fia_core::zoo::train::TrainConfig;

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of all artifacts (checkpoints/, adversarials/, results/, plots/).
    pub output_dir: PathBuf,
    /// Global seed; every random draw in the experiment derives from it.
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub zoo: ZooConfig,
    #[serde(default)]
    pub harness: HarnessConfig,
    /// Attacks evaluated by `attack`/`evaluate`.
    #[serde(default, rename = "attack")]
    pub attacks: Vec<AttackEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory of the packed dataset; defaults to `<output_dir>/dataset`.
    pub path: Option<PathBuf>,
    /// Synthesize the dataset there when missing.
    pub synthesize: bool,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: None,
            synthesize: true,
            n_train: 6000,
            n_test: 2000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ZooConfig {
    /// Architectures trained normally.
    pub archs: Vec<String>,
    /// Architectures additionally trained adversarially (defense targets).
    pub adversarial_archs: Vec<String>,
    pub train: TrainConfig,
    /// Clean-accuracy floor for adversarially trained variants.
    pub adversarial_accuracy_floor: f64,
}

impl Default for ZooConfig {
    fn default() -> Self {
        Self {
            archs: fia_core::zoo::arch::ARCH_IDS
                .iter()
                .map(|s| s.to_string())
                .collect(),
            adversarial_archs: vec!["plainnet".into(), "stridenet".into()],
            train: TrainConfig::default(),
            adversarial_accuracy_floor: 0.70,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    /// Held-out evaluation slice size.
    pub eval_images: usize,
    /// Source architectures (default: every normal zoo member).
    pub sources: Option<Vec<String>>,
    /// Target architectures (default: every normal zoo member).
    pub targets: Option<Vec<String>>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            eval_images: 500,
            sources: None,
            targets: None,
        }
    }
}

/// One attack selection: a named preset plus optional overrides.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AttackEntry {
    pub preset: String,
    #[serde(default = "default_regime")]
    pub regime: TargetRegime,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub tap: Option<String>,
    #[serde(default)]
    pub drop_prob: Option<f64>,
    #[serde(default)]
    pub ensemble_number: Option<usize>,
}

fn default_regime() -> TargetRegime {
    TargetRegime::Normal
}

impl AttackEntry {
    pub fn named(preset: &str, regime: TargetRegime) -> Self {
        Self {
            preset: preset.to_string(),
            regime,
            epsilon: None,
            iterations: None,
            tap: None,
            drop_prob: None,
            ensemble_number: None,
        }
    }

    /// Builds the concrete attack config (the per-image seed is assigned by
    /// the harness).
    pub fn resolve(&self, seed: RngSeed) -> Result<AttackConfig<f32>> {
        let mut cfg = preset::<f32>(&self.preset, self.regime, seed)
            .with_context(|| format!("attack preset `{}`", self.preset))?;
        if let Some(eps) = self.epsilon {
            cfg.budget = fia_core::image::PerturbationBudget { epsilon: eps as f32 };
        }
        if let Some(t) = self.iterations {
            cfg.iterations = t;
        }
        if let Some(tap) = &self.tap {
            cfg.tap = Some(tap.clone());
        }
        if self.drop_prob.is_some() || self.ensemble_number.is_some() {
            let mut agg = cfg.resolved_aggregation("");
            if let Some(p) = self.drop_prob {
                agg.drop_prob = p;
            }
            if let Some(n) = self.ensemble_number {
                agg.ensemble_number = n;
            }
            agg.tap = String::new();
            cfg.aggregation = Some(agg);
        }
        cfg.validate()
            .with_context(|| format!("attack `{}`", self.preset))?;
        Ok(cfg)
    }
}

/// Flag overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub dataset_path: Option<PathBuf>,
    pub eval_images: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.apply(overrides);
        cfg.check()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(dir) = &overrides.output_dir {
            self.output_dir = dir.clone();
        }
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(path) = &overrides.dataset_path {
            self.dataset.path = Some(path.clone());
        }
        if let Some(n) = overrides.eval_images {
            self.harness.eval_images = n;
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.zoo.archs.is_empty() {
            bail!("zoo.archs must name at least one architecture");
        }
        for arch in self.zoo.archs.iter().chain(&self.zoo.adversarial_archs) {
            if !fia_core::zoo::arch::ARCH_IDS.contains(&arch.as_str()) {
                bail!("unknown architecture `{arch}`");
            }
        }
        if self.harness.eval_images == 0 {
            bail!("harness.eval_images must be >= 1");
        }
        Ok(())
    }

    pub fn global_seed(&self) -> RngSeed {
        RngSeed(self.seed)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset
            .path
            .clone()
            .unwrap_or_else(|| self.output_dir.join("dataset"))
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }

    pub fn adversarials_dir(&self) -> PathBuf {
        self.output_dir.join("adversarials")
    }

    pub fn results_dir(&self) -> PathBuf {
        self.output_dir.join("results")
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.output_dir.join("plots")
    }

    /// Writes the merged effective config next to the artifacts
    /// (atomic: temp file then rename).
    pub fn echo(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.output_dir)?;
        let text = toml::to_string_pretty(self).context("serializing effective config")?;
        let path = self.output_dir.join("config.toml");
        let tmp = self.output_dir.join(".config.toml.tmp");
        fs::write(&tmp, text)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    /// Checkpoint ids of the normally trained zoo.
    pub fn normal_params_ids(&self) -> Vec<String> {
        self.zoo
            .archs
            .iter()
            .map(|a| format!("{a}-normal-s{}", train_seed_of(self, a, "normal")))
            .collect()
    }

    /// Checkpoint ids of the adversarially trained variants.
    pub fn adversarial_params_ids(&self) -> Vec<String> {
        self.zoo
            .adversarial_archs
            .iter()
            .map(|a| format!("{a}-adversarial-s{}", train_seed_of(self, a, "adversarial")))
            .collect()
    }
}

/// Per-model training seed, derived from the global seed.
pub fn train_seed_of(cfg: &ExperimentConfig, arch: &str, mode: &str) -> u64 {
    cfg.global_seed().derive(&["train", arch, mode]).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_config_round_trips() {
        let mut cfg = ExperimentConfig {
            output_dir: PathBuf::from("/tmp/x"),
            seed: 7,
            dataset: DatasetConfig::default(),
            zoo: ZooConfig::default(),
            harness: HarnessConfig::default(),
            attacks: vec![
                AttackEntry::named("FIA", TargetRegime::Normal),
                AttackEntry::named("MIM", TargetRegime::Normal),
            ],
        };
        cfg.attacks[0].drop_prob = Some(0.2);
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = ExperimentConfig {
            output_dir: PathBuf::from("a"),
            seed: 1,
            dataset: DatasetConfig::default(),
            zoo: ZooConfig::default(),
            harness: HarnessConfig::default(),
            attacks: vec![],
        };
        cfg.apply(&Overrides {
            output_dir: Some(PathBuf::from("b")),
            seed: Some(9),
            dataset_path: None,
            eval_images: Some(50),
        });
        assert_eq!(cfg.output_dir, PathBuf::from("b"));
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.harness.eval_images, 50);
    }
}
