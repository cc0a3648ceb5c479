//! Trend probe: trains (or reloads) a small zoo and prints reduced transfer
//! matrices so dataset/architecture choices can be judged quickly.
//!
//! `cargo run -p fia-core --example trend_probe -- [n_slice] [cache_dir]`

use fia_core::attacks::{preset, AttackConfig, TargetRegime};
use fia_core::harness::{format_percent, run_ablation, run_transfer_matrix};
use fia_core::rng::RngSeed;
use fia_core::zoo::checkpoint;
use fia_core::zoo::dataset::Dataset;
use fia_core::zoo::train::{train_model, TrainConfig};
use fia_core::zoo::{arch::ARCH_IDS, ModelHandle, TrainingMode};
use std::path::PathBuf;
use std::time::Instant;

fn main() {
    let n_slice: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(200);
    let cache: PathBuf = std::env::args()
        .nth(2)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("/tmp/fia_probe"));
    let seed = RngSeed(2024);

    let t0 = Instant::now();
    let data_dir = cache.join("dataset");
    let data = if data_dir.join("dataset.json").exists() {
        Dataset::load(&data_dir).unwrap()
    } else {
        let d = Dataset::generate(seed.derive(&["dataset"]), 6000, 2000);
        d.save(&data_dir).unwrap();
        d
    };
    println!("dataset ready in {:?}", t0.elapsed());

    let cfg = TrainConfig::default();
    let ckpt_dir = cache.join("checkpoints");
    let mut models: Vec<ModelHandle<f32>> = Vec::new();
    for arch in ARCH_IDS {
        let train_seed = seed.derive(&["train", arch]);
        let params_id = format!("{arch}-normal-s{}", train_seed.0);
        let m = if checkpoint::exists(&ckpt_dir, &params_id) {
            checkpoint::load(&ckpt_dir, &params_id).unwrap()
        } else {
            let t = Instant::now();
            let m = train_model(arch, &data, TrainingMode::Normal, train_seed, &cfg).unwrap();
            checkpoint::save(&m, train_seed, &data.meta.dataset_id, &ckpt_dir).unwrap();
            println!(
                "{arch}: acc {:.3} in {:?}",
                m.clean_accuracy().unwrap(),
                t.elapsed()
            );
            m
        };
        println!("{params_id}: acc {:.3}", m.clean_accuracy().unwrap_or(f64::NAN));
        models.push(m);
    }

    let slice = data.eval_slice(seed, n_slice);
    let attacks: Vec<AttackConfig<f32>> = ["FIA", "MIM", "NRDM", "FDA"]
        .iter()
        .map(|n| preset::<f32>(n, TargetRegime::Normal, seed).unwrap())
        .collect();

    let t = Instant::now();
    let matrix = run_transfer_matrix(&models, &attacks, &models, &data, &slice, seed).unwrap();
    println!("matrix in {:?}", t.elapsed());

    println!("\nwhite-box rates:");
    for c in matrix.cells.iter().filter(|c| c.white_box) {
        println!("  {:5} on {:10}: {}", c.attack, c.source.split('-').next().unwrap(), format_percent(c.rate));
    }
    println!("\nmean transfer:");
    for a in ["FIA", "MIM", "NRDM", "FDA"] {
        println!(
            "  {a}: {}",
            format_percent(matrix.mean_transfer_rate(a).unwrap())
        );
    }

    // Tap comparison: FIA from each tap of the first two sources.
    println!("\nFIA transfer by tap:");
    for source in &models[..1] {
        for tap in source.taps().to_vec() {
            let mut cfg = attacks[0].clone();
            cfg.tap = Some(tap.clone());
            let m =
                run_transfer_matrix(&models[..1].to_vec().iter().map(|_| source.clone()).collect::<Vec<_>>(), &[cfg], &models, &data, &slice, seed)
                    .unwrap();
            let wb = m.cells.iter().find(|c| c.white_box).map(|c| c.rate).unwrap_or(0.0);
            println!(
                "  {} @ {tap}: transfer {} (white-box {})",
                source.params_id().split('-').next().unwrap(),
                format_percent(m.mean_transfer_rate("FIA").unwrap()),
                format_percent(wb),
            );
        }
    }

    let abl = run_ablation(
        &[
            fia_core::attacks::losses::AblationVariant::L1,
            fia_core::attacks::losses::AblationVariant::L2,
            fia_core::attacks::losses::AblationVariant::L3,
        ],
        &attacks[0],
        &models[..1],
        &models,
        &data,
        &slice,
        seed,
    )
    .unwrap();
    println!("\nablation mean transfer (source {}):", models[0].params_id());
    for v in ["L1", "L2", "L3"] {
        println!("  {v}: {}", format_percent(abl.mean_transfer_rate(v).unwrap()));
    }
}
