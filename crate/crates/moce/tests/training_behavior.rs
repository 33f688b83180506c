//! Training-loop behavior: frozen learning, early stopping, the separable
//! sanity run, and bit-for-bit determinism.

use moce::fusion::FusionConfig;
use moce::model::{KInit, ModelConfig, MoceModel};
use moce::synth::{generate, grouped_folds, ModalitySpec, SyntheticSpec};
use moce::train::{train, TrainConfig, TrainableModel};
use std::collections::BTreeMap;

fn separable_spec() -> SyntheticSpec {
    SyntheticSpec {
        modalities: vec![
            ModalitySpec { name: "x".into(), depth: 1, branching: 2, dim: 4, noise_scale: 1.0 },
            ModalitySpec { name: "y".into(), depth: 2, branching: 2, dim: 4, noise_scale: 1.0 },
        ],
        classes: 2,
        subjects: 6,
        samples_per_subject: 8,
        noise: 0.02,
        subject_shift: 0.05,
        seed: 13,
    }
}

fn small_model(ds_dims: &BTreeMap<String, usize>, classes: usize, seed: u64) -> MoceModel {
    let config = ModelConfig {
        feature_dim: 4,
        hidden_dim: 8,
        fusion: FusionConfig {
            heads: 2,
            layers: 1,
            ..FusionConfig::default()
        },
        k_init: KInit::Shared(-2.0),
        ..ModelConfig::default()
    };
    MoceModel::new(config, ds_dims, classes, seed).unwrap()
}

fn dims_of(ds: &moce::synth::MultimodalDataset) -> BTreeMap<String, usize> {
    ds.modalities
        .iter()
        .map(|m| (m.clone(), ds.dim_of(m).unwrap()))
        .collect()
}

#[test]
fn zero_learning_rate_freezes_model_and_metrics() {
    let ds = generate(&separable_spec()).unwrap();
    let folds = grouped_folds(&ds.groups, 3).unwrap();
    let (train_groups, val_groups) = &folds[0];
    let model = small_model(&dims_of(&ds), ds.classes, 1);
    let before = model.params.flat();

    let cfg = TrainConfig {
        epochs: 4,
        learning_rate: 0.0,
        patience: 10,
        batch_size: 32,
        seed: 5,
        ..TrainConfig::default()
    };
    let out = train(model, &ds, train_groups, val_groups, &cfg).unwrap();
    assert_eq!(out.model.params.flat(), before, "parameters must not move");
    let accs: Vec<f64> = out.history.iter().map(|h| h.val_balanced_accuracy).collect();
    for a in &accs {
        assert_eq!(*a, accs[0], "metrics must be constant across epochs: {accs:?}");
    }
}

#[test]
fn zero_patience_stops_after_first_non_improving_epoch() {
    let ds = generate(&separable_spec()).unwrap();
    let folds = grouped_folds(&ds.groups, 3).unwrap();
    let (train_groups, val_groups) = &folds[0];
    let model = small_model(&dims_of(&ds), ds.classes, 1);
    // lr = 0 makes every epoch after the first non-improving.
    let cfg = TrainConfig {
        epochs: 50,
        learning_rate: 0.0,
        patience: 0,
        batch_size: 32,
        seed: 5,
        ..TrainConfig::default()
    };
    let out = train(model, &ds, train_groups, val_groups, &cfg).unwrap();
    assert_eq!(out.history.len(), 2, "epoch 0 improves from -inf, epoch 1 stops");
    assert_eq!(out.best_epoch, 0);
}

#[test]
fn separable_task_trains_to_high_accuracy() {
    let ds = generate(&separable_spec()).unwrap();
    let folds = grouped_folds(&ds.groups, 3).unwrap();
    let (train_groups, val_groups) = &folds[0];
    let model = small_model(&dims_of(&ds), ds.classes, 3);
    let cfg = TrainConfig {
        epochs: 30,
        learning_rate: 5e-3,
        patience: 10,
        batch_size: 32,
        seed: 7,
        ..TrainConfig::default()
    };
    let out = train(model, &ds, train_groups, val_groups, &cfg).unwrap();
    // Loss decreases monotonically over the first five epochs.
    let losses: Vec<f64> = out.history.iter().take(5).map(|h| h.train_loss).collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "loss not decreasing: {losses:?}");
    }
    assert!(
        out.metrics.balanced_accuracy > 0.95,
        "expected > 0.95, got {}",
        out.metrics.balanced_accuracy
    );
    // Report carries the learned geometry parameters.
    assert_eq!(out.metrics.curvatures.len(), 2);
    assert!(out.metrics.lambda.unwrap() > 0.0);
}

#[test]
fn training_is_bitwise_deterministic() {
    let ds = generate(&separable_spec()).unwrap();
    let folds = grouped_folds(&ds.groups, 3).unwrap();
    let (train_groups, val_groups) = &folds[1];
    let cfg = TrainConfig {
        epochs: 6,
        learning_rate: 2e-3,
        patience: 5,
        batch_size: 16,
        seed: 11,
        ..TrainConfig::default()
    };
    let run = || {
        let model = small_model(&dims_of(&ds), ds.classes, 2);
        let out = train(model, &ds, train_groups, val_groups, &cfg).unwrap();
        (
            serde_json::to_string(&out.history).unwrap(),
            serde_json::to_string(&out.metrics).unwrap(),
            out.model.params.flat(),
        )
    };
    let a = run();
    let b = run();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn checkpoint_eval_reproduces_training_record() {
    let ds = generate(&separable_spec()).unwrap();
    let folds = grouped_folds(&ds.groups, 3).unwrap();
    let (train_groups, val_groups) = &folds[0];
    let model = small_model(&dims_of(&ds), ds.classes, 4);
    let cfg = TrainConfig {
        epochs: 8,
        learning_rate: 2e-3,
        patience: 5,
        batch_size: 32,
        seed: 13,
        ..TrainConfig::default()
    };
    let out = train(model, &ds, train_groups, val_groups, &cfg).unwrap();

    // Serialize the best checkpoint, reload, evaluate: metrics must match the
    // train-time record exactly.
    let json = out.model.to_checkpoint_json().unwrap();
    let restored = MoceModel::from_checkpoint_json(&json).unwrap();
    let val = moce::train::eval_batches(&ds, &restored.modalities, val_groups, cfg.batch_size).unwrap();
    let preds = TrainableModel::predict(&restored, &val).unwrap();
    let labels = moce::train::batch_labels(&val);
    let metrics = moce::train::compute_metrics(&preds, &labels, restored.classes).unwrap();
    assert_eq!(metrics.balanced_accuracy, out.metrics.balanced_accuracy);
    assert_eq!(metrics.macro_f1, out.metrics.macro_f1);
}
