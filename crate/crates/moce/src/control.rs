//! Euclidean control model: the flat-geometry mirror of [`crate::model`].
//!
//! Same encoders and layer layout, with every hyperbolic operation replaced
//! by its Euclidean counterpart: per-domain batch norm (vector mean, scalar
//! variance, same momentum schedule and test-time adaptation), plain linear
//! maps, dot-product cross-attention with arithmetic-mean aggregation,
//! standard layer norm, mean pooling, and an affine classifier. Used as the
//! like-for-like baseline when measuring what the hyperbolic geometry buys.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layers::{gaussian, HbnMomentum, LAYER_NORM_EPS};
use crate::model::{cross_entropy, argmax, Batch, EncoderParams, ModelConfig};
use crate::num::{elu, Scalar};
use crate::tape::{Tape, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearParams<T> {
    pub weight: Vec<Vec<T>>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LinearParams<T> {
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        if self.weight.first().map_or(0, Vec::len) != x.len() {
            return Err(Error::dim("linear", self.weight[0].len(), x.len()));
        }
        Ok(self
            .weight
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| crate::num::dot(row, x) + b.clone())
            .collect())
    }

    pub fn map<U: Scalar>(&self, f: &mut impl FnMut(&T) -> U) -> LinearParams<U> {
        LinearParams {
            weight: self.weight.iter().map(|r| r.iter().map(&mut *f).collect()).collect(),
            bias: self.bias.iter().map(&mut *f).collect(),
        }
    }
}

impl LinearParams<f64> {
    pub fn init(rng: &mut impl rand::Rng, out_dim: usize, in_dim: usize) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        LinearParams {
            weight: (0..out_dim)
                .map(|_| (0..in_dim).map(|_| std * gaussian(rng)).collect())
                .collect(),
            bias: vec![0.0; out_dim],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlExpert<T> {
    pub encoder: EncoderParams<T>,
    pub bn_gamma: T,
    pub post: LinearParams<T>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlHead<T> {
    pub query: LinearParams<T>,
    pub key: LinearParams<T>,
    pub value: LinearParams<T>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlLayer<T> {
    pub heads: Vec<ControlHead<T>>,
    pub norm_scale: Vec<T>,
    pub norm_shift: Vec<T>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlParams<T> {
    pub experts: Vec<ControlExpert<T>>,
    pub layers: Vec<ControlLayer<T>>,
    pub output: LinearParams<T>,
    pub classifier: LinearParams<T>,
}

impl<T: Scalar> ControlParams<T> {
    pub fn map<U: Scalar>(&self, f: &mut impl FnMut(&T) -> U) -> ControlParams<U> {
        ControlParams {
            experts: self
                .experts
                .iter()
                .map(|e| ControlExpert {
                    encoder: e.encoder.map(f),
                    bn_gamma: f(&e.bn_gamma),
                    post: e.post.map(f),
                })
                .collect(),
            layers: self
                .layers
                .iter()
                .map(|l| ControlLayer {
                    heads: l
                        .heads
                        .iter()
                        .map(|h| ControlHead {
                            query: h.query.map(f),
                            key: h.key.map(f),
                            value: h.value.map(f),
                        })
                        .collect(),
                    norm_scale: l.norm_scale.iter().map(&mut *f).collect(),
                    norm_shift: l.norm_shift.iter().map(&mut *f).collect(),
                })
                .collect(),
            output: self.output.map(f),
            classifier: self.classifier.map(f),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.map(&mut |v: &T| -> f64 {
            out.push(v.value());
            0.0
        });
        out
    }
}

impl ControlParams<f64> {
    pub fn from_flat(&self, flat: &[f64]) -> Result<ControlParams<f64>> {
        let mut it = flat.iter();
        let rebuilt = self.map(&mut |_| *it.next().unwrap_or(&f64::NAN));
        if it.next().is_some() || flat.len() != self.flat().len() {
            return Err(Error::dim("control from_flat", self.flat().len(), flat.len()));
        }
        Ok(rebuilt)
    }

    pub fn lift(&self, tape: &Tape) -> (ControlParams<Var>, Vec<Var>) {
        let mut vars = Vec::new();
        let lifted = self.map(&mut |v: &f64| {
            let var = tape.var(*v);
            vars.push(var.clone());
            var
        });
        (lifted, vars)
    }
}

/// Per-domain running statistics of the Euclidean batch norm: mean vector and
/// scalar variance (mean squared distance to the mean, mirroring HBN).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EuclidBnState {
    pub dim: usize,
    pub eps: f64,
    pub momentum: HbnMomentum,
    pub domains: BTreeMap<u32, (Vec<f64>, f64)>,
}

impl EuclidBnState {
    fn new(dim: usize, momentum: HbnMomentum) -> Self {
        EuclidBnState {
            dim,
            eps: 1e-5,
            momentum,
            domains: BTreeMap::new(),
        }
    }

    fn unseen(&self) -> (Vec<f64>, f64) {
        if self.domains.is_empty() {
            return (vec![0.0; self.dim], 1.0);
        }
        let n = self.domains.len() as f64;
        let mut mean = vec![0.0; self.dim];
        let mut var = 0.0;
        for (m, v) in self.domains.values() {
            for (acc, x) in mean.iter_mut().zip(m) {
                *acc += x / n;
            }
            var += v / n;
        }
        (mean, var)
    }

    fn update(&mut self, domain: u32, mean: &[f64], var: f64, eta: f64) {
        match self.domains.get_mut(&domain) {
            None => {
                self.domains.insert(domain, (mean.to_vec(), var));
            }
            Some((m, v)) => {
                for (acc, x) in m.iter_mut().zip(mean) {
                    *acc = (1.0 - eta) * *acc + eta * x;
                }
                *v = (1.0 - eta) * *v + eta * var;
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlState {
    pub bn: Vec<EuclidBnState>,
}

/// The Euclidean mirror model. Construction mirrors [`crate::model::MoceModel`]
/// (curvature-related config fields are ignored).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlModel {
    pub config: ModelConfig,
    pub modalities: Vec<String>,
    pub input_dims: Vec<usize>,
    pub classes: usize,
    pub params: ControlParams<f64>,
    pub state: ControlState,
}

impl ControlModel {
    pub fn new(
        config: ModelConfig,
        modality_dims: &BTreeMap<String, usize>,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        use rand_chacha::rand_core::SeedableRng;
        config.validate()?;
        if modality_dims.is_empty() {
            return Err(Error::Empty("modalities"));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = config.feature_dim;
        let modalities: Vec<String> = modality_dims.keys().cloned().collect();
        let input_dims: Vec<usize> = modalities.iter().map(|m| modality_dims[m]).collect();
        let experts = input_dims
            .iter()
            .map(|&input_dim| ControlExpert {
                encoder: EncoderParams::init(&mut rng, input_dim, config.hidden_dim, d),
                bn_gamma: 1.0,
                post: LinearParams::init(&mut rng, d, d),
            })
            .collect();
        let layers = (0..config.fusion.layers)
            .map(|_| ControlLayer {
                heads: (0..config.fusion.heads)
                    .map(|_| ControlHead {
                        query: LinearParams::init(&mut rng, d, d),
                        key: LinearParams::init(&mut rng, d, d),
                        value: LinearParams::init(&mut rng, d, d),
                    })
                    .collect(),
                norm_scale: vec![1.0; d],
                norm_shift: vec![0.0; d],
            })
            .collect();
        let output = LinearParams::init(&mut rng, d, d);
        let classifier = LinearParams::init(&mut rng, classes, d);
        let bn = modalities
            .iter()
            .map(|_| EuclidBnState::new(d, config.hbn_momentum))
            .collect();
        Ok(ControlModel {
            config,
            modalities,
            input_dims,
            classes,
            params: ControlParams {
                experts,
                layers,
                output,
                classifier,
            },
            state: ControlState { bn },
        })
    }

    pub fn batch_logits<T: Scalar>(
        &self,
        params: &ControlParams<T>,
        state: &mut ControlState,
        batch: &Batch,
        training: bool,
        epoch: usize,
    ) -> Result<Vec<Vec<T>>> {
        if batch.features.len() != self.modalities.len() {
            return Err(Error::dim(
                "batch modalities",
                self.modalities.len(),
                batch.features.len(),
            ));
        }
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let n = batch.len();
        let d = self.config.feature_dim;

        let mut tokens: Vec<Vec<Vec<T>>> = Vec::with_capacity(self.modalities.len());
        for (m, expert) in params.experts.iter().enumerate() {
            let encoded: Vec<Vec<T>> = batch.features[m]
                .iter()
                .map(|x| expert.encoder.forward(x))
                .collect::<Result<_>>()?;

            // Per-domain batch norm with scalar variance.
            let bn = &state.bn[m];
            let inv_n = T::constant(1.0 / n as f64);
            let mut batch_mean = vec![T::constant(0.0); d];
            for row in &encoded {
                for (acc, x) in batch_mean.iter_mut().zip(row) {
                    *acc = acc.clone() + x.clone() * inv_n.clone();
                }
            }
            let mut batch_var = T::constant(0.0);
            for row in &encoded {
                for (x, mu) in row.iter().zip(&batch_mean) {
                    let dlt = x.clone() - mu.clone();
                    batch_var = batch_var + dlt.clone() * dlt * inv_n.clone();
                }
            }

            let (mean, var): (Vec<T>, T) = if training {
                let mean_f: Vec<f64> = batch_mean.iter().map(Scalar::value).collect();
                state.bn[m].update(
                    batch.domain,
                    &mean_f,
                    batch_var.value(),
                    self.config.hbn_momentum.eta_at(epoch),
                );
                (batch_mean.clone(), batch_var.clone())
            } else {
                let (running_mean, running_var) = match bn.domains.get(&batch.domain) {
                    Some((m, v)) => (m.clone(), *v),
                    None => bn.unseen(),
                };
                let eta = bn.momentum.eta_test;
                let adapted_mean: Vec<f64> = running_mean
                    .iter()
                    .zip(batch_mean.iter().map(Scalar::value))
                    .map(|(r, b)| (1.0 - eta) * r + eta * b)
                    .collect();
                let adapted_var = (1.0 - eta) * running_var + eta * batch_var.value();
                state.bn[m]
                    .domains
                    .insert(batch.domain, (adapted_mean.clone(), adapted_var));
                (
                    adapted_mean.into_iter().map(T::constant).collect(),
                    T::constant(adapted_var),
                )
            };

            let scale = expert.bn_gamma.clone()
                / (var + T::constant(state.bn[m].eps)).sqrt();
            let reps: Vec<Vec<T>> = encoded
                .into_iter()
                .map(|row| {
                    let normalized: Vec<T> = row
                        .into_iter()
                        .zip(&mean)
                        .map(|(x, mu)| scale.clone() * (x - mu.clone()))
                        .map(elu)
                        .collect();
                    expert.post.forward(&normalized)
                })
                .collect::<Result<_>>()?;
            tokens.push(reps);
        }

        let tau = T::constant(self.config.fusion.tau0);
        let mut logits = Vec::with_capacity(n);
        for i in 0..n {
            let mut reps: Vec<Vec<T>> = tokens.iter().map(|t| t[i].clone()).collect();
            for layer in &params.layers {
                reps = self.attention_layer(&reps, layer, &tau)?;
            }
            // Mean pool over modalities, then output projection.
            let inv_m = T::constant(1.0 / reps.len() as f64);
            let mut pooled = vec![T::constant(0.0); d];
            for rep in &reps {
                for (acc, x) in pooled.iter_mut().zip(rep) {
                    *acc = acc.clone() + x.clone() * inv_m.clone();
                }
            }
            let projected = params.output.forward(&pooled)?;
            logits.push(params.classifier.forward(&projected)?);
        }
        Ok(logits)
    }

    fn attention_layer<T: Scalar>(
        &self,
        reps: &[Vec<T>],
        layer: &ControlLayer<T>,
        tau: &T,
    ) -> Result<Vec<Vec<T>>> {
        if reps.len() < 2 {
            return Err(Error::dim("control attention modalities", 2, reps.len()));
        }
        let d = self.config.feature_dim;
        let mut updated = Vec::with_capacity(reps.len());
        for m in 0..reps.len() {
            let inv_h = T::constant(1.0 / layer.heads.len() as f64);
            let mut merged = vec![T::constant(0.0); d];
            for head in &layer.heads {
                let q = head.query.forward(&reps[m])?;
                let mut scores = Vec::new();
                let mut values = Vec::new();
                for (j, rep) in reps.iter().enumerate() {
                    if j == m {
                        continue;
                    }
                    let k = head.key.forward(rep)?;
                    scores.push(crate::num::dot(&q, &k) / tau.clone());
                    values.push(head.value.forward(rep)?);
                }
                let max = scores.iter().map(Scalar::value).fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<T> = scores
                    .iter()
                    .map(|s| (s.clone() - T::constant(max)).exp())
                    .collect();
                let total = crate::num::sum(&exps);
                for (w, v) in exps.iter().zip(&values) {
                    let wn = w.clone() / total.clone();
                    for (acc, x) in merged.iter_mut().zip(v) {
                        *acc = acc.clone() + wn.clone() * x.clone() * inv_h.clone();
                    }
                }
            }
            // Standard layer norm over coordinates.
            let inv_d = T::constant(1.0 / d as f64);
            let mean = crate::num::sum(&merged) * inv_d.clone();
            let mut var = T::constant(0.0);
            for x in &merged {
                let dlt = x.clone() - mean.clone();
                var = var + dlt.clone() * dlt * inv_d.clone();
            }
            let denom = (var + T::constant(LAYER_NORM_EPS)).sqrt();
            let normed: Vec<T> = merged
                .iter()
                .zip(layer.norm_scale.iter().zip(&layer.norm_shift))
                .map(|(x, (g, b))| {
                    g.clone() * ((x.clone() - mean.clone()) / denom.clone()) + b.clone()
                })
                .collect();
            updated.push(normed);
        }
        Ok(updated)
    }

    pub fn batch_loss<T: Scalar>(
        &self,
        params: &ControlParams<T>,
        state: &mut ControlState,
        batch: &Batch,
        training: bool,
        epoch: usize,
    ) -> Result<T> {
        let logits = self.batch_logits(params, state, batch, training, epoch)?;
        let mut acc = T::constant(0.0);
        for (l, &y) in logits.iter().zip(&batch.labels) {
            acc = acc + cross_entropy(l, y)?;
        }
        Ok(acc / T::constant(batch.len() as f64))
    }

    pub fn predict(&self, batches: &[Batch]) -> Result<Vec<u32>> {
        let mut scratch = self.state.clone();
        let mut out = Vec::new();
        for batch in batches {
            let logits = self.batch_logits(&self.params, &mut scratch, batch, false, 0)?;
            out.extend(logits.iter().map(|l| argmax(l)));
        }
        Ok(out)
    }
}
