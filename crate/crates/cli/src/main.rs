//! `fia` — desk-scale workbench for feature importance-aware transferable
//! adversarial attacks: train the model zoo, craft adversarial sets, and
//! evaluate cross-model transfer.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fia_cli::commands::{self, TargetSet};
use fia_cli::config::{ExperimentConfig, Overrides};
use fia_core::harness::SweepAxis;

#[derive(Parser)]
#[command(name = "fia", version, about)]
struct Cli {
    /// Experiment config file (TOML).
    #[arg(long, global = true, default_value = "experiment.toml")]
    config: PathBuf,
    /// Override the output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the dataset directory.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Override the evaluation slice size.
    #[arg(long, global = true)]
    eval_images: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every zoo checkpoint (reuses existing ones).
    TrainZoo,
    /// Craft adversarial sets for the configured attacks and export them.
    Attack {
        /// Source models (architecture name or params id); default: all
        /// normal zoo members.
        #[arg(long, value_delimiter = ',')]
        sources: Option<Vec<String>>,
    },
    /// Evaluate exported adversarial sets against target models.
    Evaluate {
        #[arg(long, value_enum, default_value = "normal")]
        targets: TargetSet,
        /// Results file stem under results/.
        #[arg(long, default_value = "transfer_matrix")]
        tag: String,
    },
    /// Sweep one aggregation hyperparameter and plot the curves.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values, strictly increasing.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long)]
        source: Option<String>,
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<String>>,
        /// Also evaluate against the adversarially trained targets.
        #[arg(long)]
        include_defense: bool,
    },
    /// Compare the L1/L2/L3 feature objectives under identical mechanics.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        sources: Option<Vec<String>>,
    },
    /// Export gradient/importance heatmaps and a feature montage.
    Visualize {
        #[arg(long)]
        image_index: usize,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        tap: Option<String>,
        #[arg(long, default_value_t = 0.3)]
        drop_prob: f64,
        #[arg(long, default_value_t = 30)]
        ensemble_number: usize,
    },
    /// Re-check exported adversarial images against their budgets.
    VerifyBudget {
        /// One manifest to check; default: all under adversarials/.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Axis {
    DropProb,
    EnsembleNumber,
    Layer,
}

impl From<Axis> for SweepAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::DropProb => SweepAxis::DropProb,
            Axis::EnsembleNumber => SweepAxis::EnsembleNumber,
            Axis::Layer => SweepAxis::Layer,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // Machine-readable error record on stderr.
            let record = serde_json::json!({
                "error": {
                    "message": format!("{err:#}"),
                }
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let overrides = Overrides {
        output_dir: cli.output_dir.clone(),
        seed: cli.seed,
        dataset_path: cli.dataset.clone(),
        eval_images: cli.eval_images,
    };
    let cfg = ExperimentConfig::load(&cli.config, &overrides)?;
    match &cli.command {
        Command::TrainZoo => commands::cmd_train_zoo(&cfg),
        Command::Attack { sources } => commands::cmd_attack(&cfg, sources),
        Command::Evaluate { targets, tag } => commands::cmd_evaluate(&cfg, *targets, tag),
        Command::Sweep {
            axis,
            values,
            source,
            targets,
            include_defense,
        } => commands::cmd_sweep(
            &cfg,
            (*axis).into(),
            values,
            source,
            targets,
            *include_defense,
        ),
        Command::Ablate { sources } => commands::cmd_ablate(&cfg, sources),
        Command::Visualize {
            image_index,
            model,
            tap,
            drop_prob,
            ensemble_number,
        } => commands::cmd_visualize(&cfg, *image_index, model, tap, *drop_prob, *ensemble_number),
        Command::VerifyBudget { manifest } => {
            let report = commands::cmd_verify_budget(&cfg, manifest)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.violations.is_empty() {
                anyhow::bail!("{} budget violations", report.violations.len());
            }
            Ok(())
        }
    }
}
