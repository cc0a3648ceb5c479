//! Probe for the defense-target, sweep-shape, and suppress/promote trends.
//!
//! `cargo run -p fia-core --example criteria_probe -- [n_slice] [cache_dir]`

use fia_core::attacks::{preset, run_attack, TargetRegime};
use fia_core::featimp::aggregate_gradient;
use fia_core::harness::{format_percent, run_sweep, run_transfer_matrix, SweepAxis};
use fia_core::rng::RngSeed;
use fia_core::zoo::checkpoint;
use fia_core::zoo::dataset::{Dataset, Split};
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
    let data = Dataset::load(&cache.join("dataset")).expect("run trend_probe first");
    let ckpt_dir = cache.join("checkpoints");

    let mut normal: Vec<ModelHandle<f32>> = Vec::new();
    for arch in ARCH_IDS {
        let train_seed = seed.derive(&["train", arch]);
        let params_id = format!("{arch}-normal-s{}", train_seed.0);
        normal.push(checkpoint::load(&ckpt_dir, &params_id).expect("cached normal zoo"));
    }

    let cfg = TrainConfig {
        accuracy_floor: 0.70,
        ..TrainConfig::default()
    };
    let mut defense: Vec<ModelHandle<f32>> = Vec::new();
    for arch in ["plainnet", "stridenet"] {
        let train_seed = seed.derive(&["train-adv", arch]);
        let params_id = format!("{arch}-adversarial-s{}", train_seed.0);
        let m = if checkpoint::exists(&ckpt_dir, &params_id) {
            checkpoint::load(&ckpt_dir, &params_id).unwrap()
        } else {
            let t = Instant::now();
            let m =
                train_model(arch, &data, TrainingMode::Adversarial, train_seed, &cfg).unwrap();
            checkpoint::save(&m, train_seed, &data.meta.dataset_id, &ckpt_dir).unwrap();
            println!(
                "{params_id}: acc {:.3} in {:?}",
                m.clean_accuracy().unwrap(),
                t.elapsed()
            );
            m
        };
        println!("{params_id}: acc {:.3}", m.clean_accuracy().unwrap_or(f64::NAN));
        defense.push(m);
    }

    let slice = data.eval_slice(seed, n_slice);

    // Criterion 11 shape: defense matrix, FIA (defense preset) vs MIM.
    let attacks = vec![
        preset::<f32>("FIA", TargetRegime::Defense, seed).unwrap(),
        preset::<f32>("MIM", TargetRegime::Defense, seed).unwrap(),
    ];
    let t = Instant::now();
    let matrix = run_transfer_matrix(&normal, &attacks, &defense, &data, &slice, seed).unwrap();
    println!("defense matrix in {:?}", t.elapsed());
    for a in ["FIA", "MIM"] {
        println!(
            "  defense mean transfer {a}: {}",
            format_percent(matrix.mean_transfer_rate(a).unwrap())
        );
    }

    // Criterion 10 shapes.
    let base = preset::<f32>("FIA", TargetRegime::Normal, seed).unwrap();
    let targets: Vec<ModelHandle<f32>> = normal[1..].to_vec();
    let t = Instant::now();
    let drop = run_sweep(
        SweepAxis::DropProb,
        &[0.1, 0.2, 0.3, 0.4, 0.5],
        &base,
        &normal[0],
        &targets,
        &data,
        &slice,
        seed,
    )
    .unwrap();
    println!("drop sweep in {:?}", t.elapsed());
    for p in &drop.points {
        println!("  p_d={}: mean {}", p.value, format_percent(p.mean_rate()));
    }
    let t = Instant::now();
    let ens = run_sweep(
        SweepAxis::EnsembleNumber,
        &[5.0, 10.0, 20.0, 30.0],
        &base,
        &normal[0],
        &targets,
        &data,
        &slice,
        seed,
    )
    .unwrap();
    println!("ensemble sweep in {:?}", t.elapsed());
    for p in &ens.points {
        println!("  N={}: mean {}", p.value, format_percent(p.mean_rate()));
    }

    // Criterion 8 shape: suppress/promote on 60 images of the first source.
    let model = &normal[0];
    let tap = model.default_tap().to_string();
    let (mut attacked, mut holds) = (0usize, 0usize);
    for &idx in slice.iter().take(60) {
        let example = data.example::<f32>(Split::Test, idx);
        let mut acfg = base.clone();
        acfg.seed = seed.derive(&["attack", model.params_id(), "FIA", &idx.to_string()]);
        let result = run_attack(model, &example, &acfg).unwrap();
        if result.failure.is_some() || !result.success_on_source {
            continue;
        }
        attacked += 1;
        let mut rng = acfg.seed.rng();
        let agg = aggregate_gradient(model, &example, &acfg.resolved_aggregation(&tap), &mut rng)
            .unwrap();
        let f_clean = model.features_at(&example.image, &tap).unwrap().values;
        let f_adv = model.features_at(&result.adversarial, &tap).unwrap().values;
        let (mut pos, mut neg) = (0.0f64, 0.0f64);
        let (_, c, h, w) = f_clean.dim();
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let d = agg.values[[ci, y, x]];
                    let df = (f_adv[[0, ci, y, x]] - f_clean[[0, ci, y, x]]) as f64;
                    if d > 0.0 {
                        pos += df;
                    } else if d < 0.0 {
                        neg += df;
                    }
                }
            }
        }
        if pos < 0.0 && neg > 0.0 {
            holds += 1;
        }
    }
    println!("suppress/promote: {holds}/{attacked}");
}
