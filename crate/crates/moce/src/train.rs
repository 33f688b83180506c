//! Training: gradients (reverse-mode tape, finite-difference oracle), Adam,
//! the epoch loop with grouped validation and early stopping, and metrics.

use std::collections::BTreeMap;

use crate::control::ControlModel;
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::model::{Batch, MoceModel};
use crate::synth::MultimodalDataset;
use crate::tape::{Tape, Var};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Early-stop after this many epochs without validation improvement.
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 1e-3,
            patience: 20,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Parameter("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Parameter("learning_rate must be >= 0".into()));
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::Parameter("Adam betas must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Anything the trainer can optimize: flat parameter access, a tape-based
/// loss, a plain-valued loss (the finite-difference payload), eval-mode
/// prediction, and a post-step hook.
pub trait TrainableModel: Clone {
    fn flat_params(&self) -> Vec<f64>;
    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()>;
    fn param_paths(&self) -> Vec<String>;
    /// Training-mode batch loss with parameters lifted onto `tape`; the
    /// returned leaves align with `flat_params` order. Commits normalization
    /// state updates as a side effect.
    fn tape_loss(&mut self, tape: &Tape, batch: &Batch, epoch: usize) -> Result<(Var, Vec<Var>)>;
    /// Same forward pass on plain values.
    fn value_loss(&mut self, batch: &Batch, epoch: usize) -> Result<f64>;
    fn predict(&self, batches: &[Batch]) -> Result<Vec<u32>>;
    fn after_step(&mut self) -> Result<()>;
    fn class_count(&self) -> usize;
    fn modality_names(&self) -> &[String];
    fn curvature_report(&self) -> BTreeMap<String, f64> {
        BTreeMap::new()
    }
    fn lambda_report(&self) -> Option<f64> {
        None
    }
}

impl TrainableModel for MoceModel {
    fn flat_params(&self) -> Vec<f64> {
        self.params.flat()
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        self.params = self.params.from_flat(flat)?;
        Ok(())
    }

    fn param_paths(&self) -> Vec<String> {
        MoceModel::param_paths(self)
    }

    fn tape_loss(&mut self, tape: &Tape, batch: &Batch, epoch: usize) -> Result<(Var, Vec<Var>)> {
        let (lifted, vars) = self.params.lift(tape);
        let mut state = self.state.clone();
        let loss = self.batch_loss(&lifted, &mut state, batch, true, epoch)?;
        self.state = state;
        Ok((loss, vars))
    }

    fn value_loss(&mut self, batch: &Batch, epoch: usize) -> Result<f64> {
        let mut state = self.state.clone();
        let loss = self.batch_loss(&self.params, &mut state, batch, true, epoch)?;
        self.state = state;
        Ok(loss)
    }

    fn predict(&self, batches: &[Batch]) -> Result<Vec<u32>> {
        MoceModel::predict(self, batches)
    }

    fn after_step(&mut self) -> Result<()> {
        MoceModel::after_step(self)
    }

    fn class_count(&self) -> usize {
        self.classes
    }

    fn modality_names(&self) -> &[String] {
        &self.modalities
    }

    fn curvature_report(&self) -> BTreeMap<String, f64> {
        self.curvatures().into_iter().collect()
    }

    fn lambda_report(&self) -> Option<f64> {
        Some(self.lambda())
    }
}

impl TrainableModel for ControlModel {
    fn flat_params(&self) -> Vec<f64> {
        self.params.flat()
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        self.params = self.params.from_flat(flat)?;
        Ok(())
    }

    fn param_paths(&self) -> Vec<String> {
        (0..self.params.flat().len())
            .map(|i| format!("control.param[{i}]"))
            .collect()
    }

    fn tape_loss(&mut self, tape: &Tape, batch: &Batch, epoch: usize) -> Result<(Var, Vec<Var>)> {
        let (lifted, vars) = self.params.lift(tape);
        let mut state = self.state.clone();
        let loss = self.batch_loss(&lifted, &mut state, batch, true, epoch)?;
        self.state = state;
        Ok((loss, vars))
    }

    fn value_loss(&mut self, batch: &Batch, epoch: usize) -> Result<f64> {
        let mut state = self.state.clone();
        let loss = self.batch_loss(&self.params, &mut state, batch, true, epoch)?;
        self.state = state;
        Ok(loss)
    }

    fn predict(&self, batches: &[Batch]) -> Result<Vec<u32>> {
        ControlModel::predict(self, batches)
    }

    fn after_step(&mut self) -> Result<()> {
        Ok(())
    }

    fn class_count(&self) -> usize {
        self.classes
    }

    fn modality_names(&self) -> &[String] {
        &self.modalities
    }
}

/// Reverse-mode gradient of the training-mode batch loss with respect to
/// every trainable parameter, in `flat_params` order. Non-finite entries are
/// reported with their parameter path. Works on a clone, so `model` keeps its
/// pre-call state.
pub fn gradient<M: TrainableModel>(model: &M, batch: &Batch, epoch: usize) -> Result<Vec<f64>> {
    let mut work = model.clone();
    let tape = Tape::with_capacity(1 << 16);
    let (loss, vars) = work.tape_loss(&tape, batch, epoch)?;
    if !loss.value().is_finite() {
        return Err(Error::Training {
            path: "<loss>".into(),
            detail: format!("non-finite loss {}", loss.value()),
        });
    }
    let grads = loss.backward();
    let out: Vec<f64> = vars.iter().map(|v| grads.wrt(v)).collect();
    if let Some(bad) = out.iter().position(|g| !g.is_finite()) {
        let paths = model.param_paths();
        return Err(Error::Training {
            path: paths.get(bad).cloned().unwrap_or_else(|| format!("[{bad}]")),
            detail: format!("non-finite gradient {}", out[bad]),
        });
    }
    Ok(out)
}

/// Central-difference oracle for [`gradient`]: evaluates the identical
/// training-mode loss at parameter perturbations, each on a fresh clone so
/// state side effects never leak between evaluations.
pub fn finite_difference_gradient<M: TrainableModel>(
    model: &M,
    batch: &Batch,
    epoch: usize,
    h: f64,
) -> Result<Vec<f64>> {
    let base = model.flat_params();
    let mut grad = Vec::with_capacity(base.len());
    let mut work = base.clone();
    for i in 0..base.len() {
        work[i] = base[i] + h;
        let mut plus = model.clone();
        plus.set_flat_params(&work)?;
        let fp = plus.value_loss(batch, epoch)?;
        work[i] = base[i] - h;
        let mut minus = model.clone();
        minus.set_flat_params(&work)?;
        let fm = minus.value_loss(batch, epoch)?;
        work[i] = base[i];
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let b1c = 1.0 - cfg.beta1.powi(self.t);
        let b2c = 1.0 - cfg.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / b1c;
            let vhat = *v / b2c;
            *p -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Batch assembly (domain-homogeneous mini-batches)
// ---------------------------------------------------------------------------

fn rows_by_domain(ds: &MultimodalDataset, groups: &[u32]) -> BTreeMap<u32, Vec<usize>> {
    let mut by_domain: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, g) in ds.groups.iter().enumerate() {
        if groups.contains(g) {
            by_domain.entry(*g).or_default().push(i);
        }
    }
    by_domain
}

fn build_batch(ds: &MultimodalDataset, modalities: &[String], rows: &[usize], domain: u32) -> Batch {
    Batch {
        features: modalities
            .iter()
            .map(|m| rows.iter().map(|&r| ds.features[m][r].clone()).collect())
            .collect(),
        labels: rows.iter().map(|&r| ds.labels[r]).collect(),
        domain,
    }
}

/// Deterministic evaluation batches: domains ascending, rows in dataset order.
pub fn eval_batches(
    ds: &MultimodalDataset,
    modalities: &[String],
    groups: &[u32],
    batch_size: usize,
) -> Result<Vec<Batch>> {
    let by_domain = rows_by_domain(ds, groups);
    if by_domain.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut batches = Vec::new();
    for (domain, rows) in by_domain {
        for chunk in rows.chunks(batch_size) {
            batches.push(build_batch(ds, modalities, chunk, domain));
        }
    }
    Ok(batches)
}

/// Shuffled training batches: rows shuffled within each domain, then the
/// batch order shuffled across domains.
pub fn train_batches(
    ds: &MultimodalDataset,
    modalities: &[String],
    groups: &[u32],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Batch>> {
    let by_domain = rows_by_domain(ds, groups);
    if by_domain.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let mut batches = Vec::new();
    for (domain, mut rows) in by_domain {
        rows.shuffle(rng);
        for chunk in rows.chunks(batch_size) {
            batches.push(build_batch(ds, modalities, chunk, domain));
        }
    }
    batches.shuffle(rng);
    Ok(batches)
}

pub fn batch_labels(batches: &[Batch]) -> Vec<u32> {
    batches.iter().flat_map(|b| b.labels.iter().copied()).collect()
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Balanced accuracy, macro F1, per-class recalls, and the confusion matrix,
/// plus the learned geometry parameters when the model has them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    pub per_class_recall: Vec<f64>,
    /// `confusion[true_class][predicted_class]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub curvatures: BTreeMap<String, f64>,
    pub lambda: Option<f64>,
}

/// Balanced accuracy `(1/C) sum_i TP_i / (TP_i + FN_i)` and macro F1
/// `(1/C) sum_i 2 TP_i / (2 TP_i + FP_i + FN_i)`. Classes absent from the
/// labels contribute recall 0 (kept in the average so folds stay comparable).
pub fn compute_metrics(predictions: &[u32], labels: &[u32], classes: usize) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::dim("compute_metrics", labels.len(), predictions.len()));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y as usize >= classes || p as usize >= classes {
            return Err(Error::Parameter(format!(
                "class index out of range: pred {p}, label {y}, classes {classes}"
            )));
        }
        confusion[y as usize][p as usize] += 1;
    }
    let mut recalls = Vec::with_capacity(classes);
    let mut f1s = Vec::with_capacity(classes);
    for c in 0..classes {
        let tp = confusion[c][c];
        let r#fn: usize = confusion[c].iter().sum::<usize>() - tp;
        let fp: usize = (0..classes).map(|y| confusion[y][c]).sum::<usize>() - tp;
        let recall = if tp + r#fn == 0 {
            0.0
        } else {
            tp as f64 / (tp + r#fn) as f64
        };
        let f1 = if 2 * tp + fp + r#fn == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + r#fn) as f64
        };
        recalls.push(recall);
        f1s.push(f1);
    }
    Ok(MetricsReport {
        balanced_accuracy: recalls.iter().sum::<f64>() / classes as f64,
        macro_f1: f1s.iter().sum::<f64>() / classes as f64,
        per_class_recall: recalls,
        confusion,
        curvatures: BTreeMap::new(),
        lambda: None,
    })
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_balanced_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    /// Best-validation checkpoint (parameters and normalization state).
    pub model: M,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Metrics of the best checkpoint on the validation groups.
    pub metrics: MetricsReport,
}

/// Per-fold report emitted as JSON by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub epoch: usize,
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    pub curvatures: BTreeMap<String, f64>,
    pub lambda: Option<f64>,
}

/// Train with Adam over shuffled domain-homogeneous mini-batches, tracking
/// balanced accuracy on the validation groups, stopping after `patience`
/// epochs without improvement, and returning the best checkpoint.
pub fn train<M: TrainableModel>(
    mut model: M,
    ds: &MultimodalDataset,
    train_groups: &[u32],
    val_groups: &[u32],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    ds.validate()?;
    if train_groups.is_empty() || val_groups.is_empty() {
        return Err(Error::Empty("train/validation group split"));
    }
    let modalities: Vec<String> = model.modality_names().to_vec();
    let val = eval_batches(ds, &modalities, val_groups, cfg.batch_size)?;
    let val_labels = batch_labels(&val);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.flat_params().len());
    let mut history = Vec::new();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_model = model.clone();
    let mut stale = 0usize;

    for epoch in 0..cfg.epochs {
        let batches = train_batches(ds, &modalities, train_groups, cfg.batch_size, &mut rng)?;
        let mut loss_sum = 0.0;
        for batch in &batches {
            let tape = Tape::with_capacity(1 << 16);
            let (loss, vars) = model.tape_loss(&tape, batch, epoch)?;
            if !loss.value().is_finite() {
                return Err(Error::Training {
                    path: "<loss>".into(),
                    detail: format!("non-finite loss at epoch {epoch}"),
                });
            }
            loss_sum += loss.value();
            let grads_sweep = loss.backward();
            let grads: Vec<f64> = vars.iter().map(|v| grads_sweep.wrt(v)).collect();
            if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
                let paths = model.param_paths();
                return Err(Error::Training {
                    path: paths.get(bad).cloned().unwrap_or_else(|| format!("[{bad}]")),
                    detail: format!("non-finite gradient at epoch {epoch}"),
                });
            }
            let mut params = model.flat_params();
            adam.step(&mut params, &grads, cfg);
            model.set_flat_params(&params)?;
            model.after_step()?;
        }

        let preds = model.predict(&val)?;
        let metrics = compute_metrics(&preds, &val_labels, model.class_count())?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            val_balanced_accuracy: metrics.balanced_accuracy,
        });

        if metrics.balanced_accuracy > best_acc {
            best_acc = metrics.balanced_accuracy;
            best_epoch = epoch;
            best_model = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }

    // Final report comes from the best checkpoint (deterministic re-eval).
    let preds = best_model.predict(&val)?;
    let mut metrics = compute_metrics(&preds, &val_labels, best_model.class_count())?;
    metrics.curvatures = best_model.curvature_report();
    metrics.lambda = best_model.lambda_report();
    Ok(TrainOutcome {
        model: best_model,
        best_epoch,
        history,
        metrics,
    })
}
