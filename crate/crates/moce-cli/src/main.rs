//! Command-line entry point: dataset generation, δ-hyperbolicity analysis,
//! grouped cross-validation training, and checkpoint evaluation.
//!
//! Structured JSON goes to stdout, logs to stderr. Exit codes: 0 success,
//! 2 input/validation error, 3 version/compatibility error, 4 convergence
//! failure. All randomness derives from the single seed in the config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use moce::error::Error as MoceError;
use moce::hyperbolicity::{delta_rel_sampled, Metric, MetricCloud};
use moce::model::{ModelConfig, MoceModel};
use moce::stats;
use moce::synth::{
    generate, grouped_folds, read_csv_matrix, read_dataset, write_dataset, MultimodalDataset,
    SyntheticSpec,
};
use moce::train::{self, train, FoldReport, TrainConfig, TrainableModel};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "moce",
    version,
    about = "Mixture-of-curvature experts: synthesis, hyperbolicity analysis, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic hierarchical multimodal dataset.
    Gen {
        /// JSON file with the generator settings.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory (manifest.json + CSVs).
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate diameter-normalized Gromov δ-hyperbolicity of a point cloud.
    Delta {
        /// CSV input: feature matrix, or a square distance matrix with
        /// `--metric precomputed`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "euclidean")]
        metric: MetricArg,
        #[arg(long, default_value_t = 400)]
        batch_size: usize,
        #[arg(long, default_value_t = 10)]
        batches: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train with grouped cross-validation; writes per-fold checkpoints,
    /// metrics, and a summary.
    Train {
        /// Run configuration JSON (see the README for the schema).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MetricArg {
    Euclidean,
    Precomputed,
}

/// Full run configuration; unknown keys are rejected everywhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    data: DataSource,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
    eval: EvalConfig,
}

/// Either an inline generator spec or a dataset directory; exactly one.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalConfig {
    folds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Aggregate {
    mean: f64,
    std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainSummary {
    seed: u64,
    folds: Vec<FoldReport>,
    balanced_accuracy: Aggregate,
    macro_f1: Aggregate,
}

fn exit_code_for(err: &MoceError) -> u8 {
    match err {
        MoceError::Version { .. } => 3,
        MoceError::Convergence { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn run(cli: Cli) -> Result<(), MoceError> {
    match cli.command {
        Command::Gen { spec, out } => cmd_gen(&spec, &out),
        Command::Delta {
            input,
            metric,
            batch_size,
            batches,
            seed,
        } => cmd_delta(&input, metric, batch_size, batches, seed),
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Eval { checkpoint, data } => cmd_eval(&checkpoint, &data),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, MoceError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MoceError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| MoceError::Data(format!("{}: {e}", path.display())))
}

fn cmd_gen(spec_path: &Path, out: &Path) -> Result<(), MoceError> {
    let spec: SyntheticSpec = read_json(spec_path)?;
    let ds = generate(&spec)?;
    write_dataset(&ds, out)?;
    eprintln!(
        "wrote {} samples x {} modalities to {}",
        ds.len(),
        ds.modalities.len(),
        out.display()
    );
    let manifest = std::fs::read_to_string(out.join("manifest.json"))?;
    println!("{manifest}");
    Ok(())
}

fn cmd_delta(
    input: &Path,
    metric: MetricArg,
    batch_size: usize,
    batches: usize,
    seed: u64,
) -> Result<(), MoceError> {
    let rows = read_csv_matrix(input)?;
    let cloud = match metric {
        MetricArg::Euclidean => MetricCloud::euclidean(rows)?,
        MetricArg::Precomputed => MetricCloud::precomputed(rows)?,
    };
    debug_assert_eq!(
        cloud.metric(),
        match metric {
            MetricArg::Euclidean => Metric::Euclidean,
            MetricArg::Precomputed => Metric::Precomputed,
        }
    );
    let report = delta_rel_sampled(&cloud, batch_size, batches, seed)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn load_dataset(source: &DataSource) -> Result<MultimodalDataset, MoceError> {
    match (&source.spec, &source.path) {
        (Some(spec), None) => generate(spec),
        (None, Some(path)) => read_dataset(path),
        _ => Err(MoceError::Data(
            "config data section needs exactly one of `spec` or `path`".into(),
        )),
    }
}

fn modality_dims(ds: &MultimodalDataset) -> Result<BTreeMap<String, usize>, MoceError> {
    ds.modalities
        .iter()
        .map(|m| {
            ds.dim_of(m)
                .map(|d| (m.clone(), d))
                .ok_or_else(|| MoceError::Data(format!("modality {m} has no rows")))
        })
        .collect()
}

fn cmd_train(config_path: &Path, out: &Path) -> Result<(), MoceError> {
    let cfg: RunConfig = read_json(config_path)?;
    // Validate everything before any file is written.
    cfg.model.validate()?;
    cfg.train.validate()?;
    let ds = load_dataset(&cfg.data)?;
    ds.validate()?;
    let dims = modality_dims(&ds)?;
    let folds = grouped_folds(&ds.groups, cfg.eval.folds)?;

    std::fs::create_dir_all(out)?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut reports = Vec::with_capacity(folds.len());
    for (i, (train_groups, val_groups)) in folds.iter().enumerate() {
        let model_seed = master.next_u64();
        let fold_seed = master.next_u64();
        let model = MoceModel::new(cfg.model.clone(), &dims, ds.classes, model_seed)?;
        let fold_cfg = TrainConfig {
            seed: fold_seed,
            ..cfg.train
        };
        eprintln!(
            "fold {i}: training on {} groups, validating on {:?}",
            train_groups.len(),
            val_groups
        );
        let outcome = train(model, &ds, train_groups, val_groups, &fold_cfg)?;

        let fold_dir = out.join(format!("fold_{i}"));
        std::fs::create_dir_all(&fold_dir)?;
        std::fs::write(
            fold_dir.join("checkpoint.json"),
            outcome.model.to_checkpoint_json()?,
        )?;
        let report = FoldReport {
            fold: i,
            epoch: outcome.best_epoch,
            balanced_accuracy: outcome.metrics.balanced_accuracy,
            macro_f1: outcome.metrics.macro_f1,
            curvatures: outcome.metrics.curvatures.clone(),
            lambda: outcome.metrics.lambda,
        };
        let mut fold_json = serde_json::to_string_pretty(&serde_json::json!({
            "report": report,
            "history": outcome.history,
            "metrics": outcome.metrics,
        }))?;
        fold_json.push('\n');
        std::fs::write(fold_dir.join("metrics.json"), fold_json)?;
        eprintln!(
            "fold {i}: best epoch {} balanced accuracy {:.4}",
            outcome.best_epoch, outcome.metrics.balanced_accuracy
        );
        reports.push(report);
    }

    let accs: Vec<f64> = reports.iter().map(|r| r.balanced_accuracy).collect();
    let f1s: Vec<f64> = reports.iter().map(|r| r.macro_f1).collect();
    let summary = TrainSummary {
        seed: cfg.train.seed,
        folds: reports,
        balanced_accuracy: Aggregate {
            mean: stats::mean(&accs),
            std: stats::sample_std(&accs),
        },
        macro_f1: Aggregate {
            mean: stats::mean(&f1s),
            std: stats::sample_std(&f1s),
        },
    };
    let mut summary_json = serde_json::to_string_pretty(&summary)?;
    summary_json.push('\n');
    std::fs::write(out.join("summary.json"), &summary_json)?;
    print!("{summary_json}");
    Ok(())
}

fn cmd_eval(checkpoint_path: &Path, data: &Path) -> Result<(), MoceError> {
    let text = std::fs::read_to_string(checkpoint_path)
        .map_err(|e| MoceError::Data(format!("{}: {e}", checkpoint_path.display())))?;
    let model = MoceModel::from_checkpoint_json(&text)?;
    let ds = read_dataset(data)?;
    ds.validate()?;

    // Explicit shape check so mismatches fail with a clear message.
    for (name, &expected) in model.modalities.iter().zip(&model.input_dims) {
        match ds.dim_of(name) {
            Some(d) if d == expected => {}
            Some(d) => {
                return Err(MoceError::Data(format!(
                    "modality {name}: checkpoint expects dim {expected}, dataset has {d}"
                )))
            }
            None => {
                return Err(MoceError::Data(format!(
                    "dataset is missing modality {name} required by the checkpoint"
                )))
            }
        }
    }

    let groups = ds.group_ids();
    let batches = train::eval_batches(&ds, &model.modalities, &groups, 32)?;
    let preds = TrainableModel::predict(&model, &batches)?;
    let labels = train::batch_labels(&batches);
    let mut metrics = train::compute_metrics(&preds, &labels, model.classes)?;
    metrics.curvatures = model.curvatures().into_iter().collect();
    metrics.lambda = Some(model.lambda());
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}
