//! End-to-end CLI flows on a miniature zoo: config echo round-trip,
//! idempotent training, manifest contracts, the standalone budget verifier,
//! sweep/visualize artifact emission.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use fia_cli::commands::{self, TargetSet};
use fia_cli::config::{AttackEntry, DatasetConfig, ExperimentConfig, HarnessConfig, Overrides, ZooConfig};
use fia_core::attacks::TargetRegime;
use fia_core::harness::SweepAxis;
use fia_core::zoo::train::TrainConfig;

fn tiny_config(root: &Path) -> ExperimentConfig {
    ExperimentConfig {
        output_dir: root.to_path_buf(),
        seed: 77,
        dataset: DatasetConfig {
            path: None,
            synthesize: true,
            n_train: 900,
            n_test: 200,
        },
        zoo: ZooConfig {
            archs: vec!["plainnet".into(), "stridenet".into()],
            adversarial_archs: vec![],
            train: TrainConfig {
                epochs: 4,
                accuracy_floor: 0.0,
                ..TrainConfig::default()
            },
            adversarial_accuracy_floor: 0.0,
        },
        harness: HarnessConfig {
            eval_images: 16,
            sources: None,
            targets: None,
        },
        attacks: vec![
            AttackEntry::named("FIA", TargetRegime::Normal),
            AttackEntry::named("MIM", TargetRegime::Normal),
        ],
    }
}

/// One shared miniature experiment; trained once per test binary run.
fn fixture() -> &'static ExperimentConfig {
    static FIXTURE: OnceLock<ExperimentConfig> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli_flow_fixture");
        let cfg = tiny_config(&root);
        commands::cmd_train_zoo(&cfg).expect("fixture zoo");
        commands::cmd_attack(&cfg, &None).expect("fixture attacks");
        cfg
    })
}

#[test]
fn effective_config_echo_round_trips() {
    let cfg = fixture();
    let echoed = cfg.echo().unwrap();
    let loaded = ExperimentConfig::load(&echoed, &Overrides::default()).unwrap();
    assert_eq!(&loaded, cfg);
}

#[test]
fn train_zoo_rerun_reports_cached_checkpoints() {
    let cfg = fixture();
    // All checkpoints exist; a second run must reuse them (and be fast).
    let t0 = std::time::Instant::now();
    commands::cmd_train_zoo(cfg).unwrap();
    assert!(t0.elapsed().as_secs() < 30, "cached rerun was not cheap");
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli_flow_missing");
    let mut cfg = tiny_config(&root);
    cfg.dataset.synthesize = false;
    cfg.dataset.path = Some(root.join("nowhere"));
    let err = commands::cmd_train_zoo(&cfg).unwrap_err();
    assert!(err.to_string().contains("dataset"), "{err:#}");
}

#[test]
fn sidecar_accuracy_matches_reevaluation() {
    let cfg = fixture();
    let manifest = fia_cli::artifacts::ZooManifest::load(cfg).unwrap();
    let dataset = fia_cli::artifacts::load_dataset(cfg).unwrap();
    for entry in &manifest.models {
        let model =
            fia_core::zoo::checkpoint::load::<f32>(&cfg.checkpoints_dir(), &entry.params_id)
                .unwrap();
        let acc = fia_core::zoo::train::handle_accuracy(
            &model,
            &dataset,
            fia_core::zoo::dataset::Split::Test,
            256,
        )
        .unwrap();
        assert!(
            (acc - entry.clean_accuracy).abs() <= 0.001,
            "{}: sidecar {} vs re-evaluated {acc}",
            entry.params_id,
            entry.clean_accuracy
        );
    }
}

#[test]
fn manifests_echo_the_attack_config() {
    let cfg = fixture();
    for path in fia_cli::artifacts::find_manifests(cfg).unwrap() {
        let (manifest, _) = fia_cli::artifacts::read_crafted_set(&path).unwrap();
        assert_eq!(manifest.config_echo.name(), manifest.attack_id);
        assert_eq!(manifest.global_seed, cfg.seed);
        assert_eq!(manifest.images.len(), cfg.harness.eval_images);
    }
}

#[test]
fn zero_epsilon_attack_writes_unperturbed_images() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli_flow_eps0");
    let mut cfg = tiny_config(&root);
    cfg.zoo.archs = vec!["plainnet".into()];
    cfg.harness.eval_images = 4;
    cfg.attacks = vec![AttackEntry {
        epsilon: Some(0.0),
        ..AttackEntry::named("MIM", TargetRegime::Normal)
    }];
    commands::cmd_train_zoo(&cfg).unwrap();
    commands::cmd_attack(&cfg, &None).unwrap();

    let dataset = fia_cli::artifacts::load_dataset(&cfg).unwrap();
    for path in fia_cli::artifacts::find_manifests(&cfg).unwrap() {
        let (manifest, batch) = fia_cli::artifacts::read_crafted_set(&path).unwrap();
        for (pos, rec) in manifest.images.iter().enumerate() {
            let clean = dataset.raw_image(fia_core::zoo::dataset::Split::Test, rec.test_index);
            let adv: Vec<u8> = batch
                .data()
                .index_axis(ndarray::Axis(0), pos)
                .iter()
                .map(|&v| v as u8)
                .collect();
            assert_eq!(adv, clean, "image {} changed under eps=0", rec.file);
        }
    }
}

#[test]
fn standalone_verifier_accepts_exported_images() {
    let cfg = fixture();
    let config_path = cfg.output_dir.join("config.toml");
    cfg.echo().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fia"))
        .args([
            "--config",
            config_path.to_str().unwrap(),
            "verify-budget",
        ])
        .output()
        .expect("running fia verify-budget");
    assert!(
        out.status.success(),
        "verify-budget failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["violations"].as_array().unwrap().len(), 0);
    assert!(report["images_checked"].as_u64().unwrap() > 0);
}

#[test]
fn verifier_flags_a_corrupted_image() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli_flow_corrupt");
    let mut cfg = tiny_config(&root);
    cfg.zoo.archs = vec!["plainnet".into()];
    cfg.harness.eval_images = 3;
    cfg.attacks = vec![AttackEntry::named("MIM", TargetRegime::Normal)];
    commands::cmd_train_zoo(&cfg).unwrap();
    commands::cmd_attack(&cfg, &None).unwrap();

    // Corrupt one exported image far beyond the budget.
    let manifest_path = fia_cli::artifacts::find_manifests(&cfg).unwrap()[0].clone();
    let (manifest, _) = fia_cli::artifacts::read_crafted_set(&manifest_path).unwrap();
    let img_path = manifest_path.parent().unwrap().join(&manifest.images[0].file);
    let img = image::open(&img_path).unwrap().to_rgb8();
    let mut broken = img.clone();
    for px in broken.pixels_mut() {
        px[0] = px[0].wrapping_add(120);
    }
    broken.save(&img_path).unwrap();

    let report = commands::cmd_verify_budget(&cfg, &Some(manifest_path)).unwrap();
    assert!(!report.violations.is_empty());
}

#[test]
fn evaluate_writes_matrix_with_both_denominators() {
    let cfg = fixture();
    commands::cmd_evaluate(cfg, TargetSet::Normal, "transfer_matrix").unwrap();
    let csv = fs::read_to_string(cfg.results_dir().join("transfer_matrix.csv")).unwrap();
    assert!(csv.starts_with("source,attack,target,n,successes,rate,white_box\n"));
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(cfg.results_dir().join("transfer_matrix.json")).unwrap())
            .unwrap();
    let cells = json["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 2 * 2 * 2); // sources x attacks x targets
    for cell in cells {
        assert!(cell["rate_all"].is_number());
        assert!(cell["n"].as_u64().unwrap() <= cell["n_all"].as_u64().unwrap());
    }
}

#[test]
fn evaluate_with_no_manifests_writes_header_only_matrix() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli_flow_empty");
    let mut cfg = tiny_config(&root);
    cfg.zoo.archs = vec!["plainnet".into()];
    cfg.attacks = vec![];
    commands::cmd_train_zoo(&cfg).unwrap();
    commands::cmd_evaluate(&cfg, TargetSet::Normal, "transfer_matrix").unwrap();
    let csv = fs::read_to_string(cfg.results_dir().join("transfer_matrix.csv")).unwrap();
    assert_eq!(csv, "source,attack,target,n,successes,rate,white_box\n");
}

#[test]
fn sweep_emits_matching_axis_values_and_a_plot() {
    let cfg = fixture();
    let values = [1.0, 2.0, 4.0];
    commands::cmd_sweep(
        cfg,
        SweepAxis::EnsembleNumber,
        &values,
        &None,
        &None,
        false,
    )
    .unwrap();
    let json: serde_json::Value = serde_json::from_slice(
        &fs::read(cfg.results_dir().join("sweep_ensemble_number.json")).unwrap(),
    )
    .unwrap();
    let got: Vec<f64> = json["points"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["value"].as_f64().unwrap())
        .collect();
    assert_eq!(got, values);
    let plot = cfg.plots_dir().join("sweep_ensemble_number.png");
    assert!(image::open(&plot).is_ok(), "plot not a valid image");
}

#[test]
fn visualize_raw_equals_aggregate_at_zero_drop() {
    let cfg = fixture();
    commands::cmd_visualize(cfg, 0, &None, &None, 0.0, 1).unwrap();
    let manifest = fia_cli::artifacts::ZooManifest::load(cfg).unwrap();
    let model_id = &manifest.models[0].params_id;
    let model = fia_core::zoo::checkpoint::load::<f32>(&cfg.checkpoints_dir(), model_id).unwrap();
    let stem = format!("viz_{model_id}_{}_img00000", model.default_tap());
    let raw = image::open(cfg.plots_dir().join(format!("{stem}_raw.png")))
        .unwrap()
        .to_luma8();
    let agg = image::open(cfg.plots_dir().join(format!("{stem}_aggregate.png")))
        .unwrap()
        .to_luma8();
    assert_eq!(raw.as_raw(), agg.as_raw());
    assert!(image::open(cfg.plots_dir().join(format!("{stem}_features.png"))).is_ok());
    // Normalized heatmap spans [0, 1]: both extremes must occur.
    assert!(raw.as_raw().iter().any(|&v| v == 0));
    assert!(raw.as_raw().iter().any(|&v| v == 255));
}
