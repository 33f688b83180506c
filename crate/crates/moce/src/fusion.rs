//! Curvature-oriented cross-modal fusion.
//!
//! Modalities live on their own Lorentz manifolds; fusion projects them onto
//! a shared manifold whose curvature is the mean of the modality curvatures,
//! then runs cross-attention where each modality attends only to the others.
//! Learned curvatures steer the attention twice: the softmax temperature is
//! `tau0 / sqrt(|K^(m)|)` (sharper for strongly curved queries), and the
//! first layer adds a prior bias `lambda * log(|K^(j)| + eps)` favoring keys
//! from strongly curved modalities.

use crate::error::{Error, Result};
use crate::frechet::{frechet_mean, weighted_frechet_mean, FrechetConfig};
use crate::layers::{
    hyperbolic_layer_norm, lorentz_linear, LayerNormParams, LorentzLinearParams,
};
use crate::lorentz::{
    exp_map_origin, geodesic_distance, log_map_origin, LorentzPoint, PointBatch,
};
use crate::num::{softplus, Scalar};
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters of the fusion block.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Base attention temperature `tau0 > 0`.
    pub tau0: f64,
    /// Stabilizer inside the log-curvature prior `phi(K) = ln(|K| + eps)`.
    pub eps_prior: f64,
    pub heads: usize,
    pub layers: usize,
    /// Curvature-oriented attention: curvature-scaled temperature plus the
    /// first-layer curvature prior. Disabled, attention runs at the fixed
    /// base temperature with no prior — the isolation setting used when
    /// analyzing what the curvatures themselves learn.
    pub curvature_guided: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            tau0: 1.0,
            eps_prior: 1e-6,
            heads: 4,
            layers: 2,
            curvature_guided: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 > 0.0) {
            return Err(Error::Parameter("fusion tau0 must be > 0".into()));
        }
        if !(self.eps_prior > 0.0) {
            return Err(Error::Parameter("fusion eps_prior must be > 0".into()));
        }
        if self.heads < 1 || self.layers < 1 {
            return Err(Error::Parameter("fusion needs heads >= 1 and layers >= 1".into()));
        }
        Ok(())
    }
}

/// Per-head query/key/value projections on the fusion manifold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadParams<T> {
    pub query: LorentzLinearParams<T>,
    pub key: LorentzLinearParams<T>,
    pub value: LorentzLinearParams<T>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionLayerParams<T> {
    pub heads: Vec<HeadParams<T>>,
    pub layer_norm: LayerNormParams<T>,
}

/// Trainable fusion parameters. The curvature-prior strength is stored as an
/// unconstrained scalar and realized as `lambda = softplus(lambda_raw) > 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionParams<T> {
    pub lambda_raw: T,
    pub layers: Vec<FusionLayerParams<T>>,
    /// Final hyperbolic linear projection after the modality-level pool.
    pub output: LorentzLinearParams<T>,
}

impl<T: Scalar> FusionParams<T> {
    pub fn lambda(&self) -> T {
        softplus(self.lambda_raw.clone())
    }

    /// Traversal order: `lambda_raw`, then per layer (per head: Q, K, V, then
    /// layer norm), then the output projection.
    pub fn map<U: Scalar>(&self, f: &mut impl FnMut(&T) -> U) -> FusionParams<U> {
        FusionParams {
            lambda_raw: f(&self.lambda_raw),
            layers: self
                .layers
                .iter()
                .map(|layer| FusionLayerParams {
                    heads: layer
                        .heads
                        .iter()
                        .map(|h| HeadParams {
                            query: h.query.map(f),
                            key: h.key.map(f),
                            value: h.value.map(f),
                        })
                        .collect(),
                    layer_norm: layer.layer_norm.map(f),
                })
                .collect(),
            output: self.output.map(f),
        }
    }
}

impl FusionParams<f64> {
    /// Fresh parameters for feature dimension `d`, `lambda` initialized at
    /// `lambda_init` via inverse softplus.
    pub fn init(rng: &mut impl rand::Rng, d: usize, cfg: &FusionConfig, lambda_init: f64) -> Self {
        use crate::layers::Activation;
        let ambient = d + 1;
        FusionParams {
            lambda_raw: inverse_softplus(lambda_init),
            layers: (0..cfg.layers)
                .map(|_| FusionLayerParams {
                    heads: (0..cfg.heads)
                        .map(|_| HeadParams {
                            query: LorentzLinearParams::init(rng, d, ambient, Activation::None),
                            key: LorentzLinearParams::init(rng, d, ambient, Activation::None),
                            value: LorentzLinearParams::init(rng, d, ambient, Activation::None),
                        })
                        .collect(),
                    layer_norm: LayerNormParams::identity(d),
                })
                .collect(),
            output: LorentzLinearParams::init(rng, d, ambient, Activation::None),
        }
    }
}

/// `x` such that `softplus(x) = y`.
pub fn inverse_softplus(y: f64) -> f64 {
    assert!(y > 0.0, "softplus is positive");
    (y.exp() - 1.0).ln()
}

/// Fusion-manifold curvature: arithmetic mean of the modality curvatures.
pub fn fusion_curvature<T: Scalar>(curvatures: &[T]) -> Result<T> {
    if curvatures.is_empty() {
        return Err(Error::Empty("fusion_curvature"));
    }
    Ok(crate::num::sum(curvatures) / T::constant(curvatures.len() as f64))
}

/// Project a point between Lorentz manifolds:
/// `exp_o^{K_f}( sqrt(K_m / K_f) * log_o^{K_m}(z) )`.
pub fn project_between_manifolds<T: Scalar>(
    z: &LorentzPoint<T>,
    k_target: T,
) -> Result<LorentzPoint<T>> {
    if !(k_target.value() < 0.0) {
        return Err(Error::Geometry(format!(
            "target curvature must be strictly negative, got {}",
            k_target.value()
        )));
    }
    let scale = (z.curvature().clone() / k_target.clone()).sqrt();
    let tangent = log_map_origin(z);
    let scaled: Vec<T> = tangent.iter().map(|t| scale.clone() * t.clone()).collect();
    exp_map_origin(&scaled, k_target)
}

/// Curvature-scaled temperature `tau^(m) = tau0 / sqrt(|K^(m)|)`.
pub fn curvature_temperature<T: Scalar>(k: &T, tau0: f64) -> Result<T> {
    if !(tau0 > 0.0) {
        return Err(Error::Parameter("tau0 must be > 0".into()));
    }
    Ok(T::constant(tau0) / k.abs().sqrt())
}

/// Softmax attention over keys from other modalities:
/// `softmax_j( -d^2(q, k_j) / tau + [lambda * ln(|K_j| + eps)] )`,
/// the prior term included only when `apply_prior` is set.
pub fn attention_weights<T: Scalar>(
    query: &LorentzPoint<T>,
    keys: &[LorentzPoint<T>],
    key_curvatures: &[T],
    temperature: &T,
    lambda: &T,
    eps_prior: f64,
    apply_prior: bool,
) -> Result<Vec<T>> {
    if keys.is_empty() {
        return Err(Error::Empty("attention_weights keys"));
    }
    if keys.len() != key_curvatures.len() {
        return Err(Error::dim("attention_weights curvatures", keys.len(), key_curvatures.len()));
    }
    let mut logits = Vec::with_capacity(keys.len());
    for (key, k_j) in keys.iter().zip(key_curvatures) {
        let d = geodesic_distance(query, key)?;
        let mut logit = -(d.clone() * d) / temperature.clone();
        if apply_prior {
            logit = logit + lambda.clone() * (k_j.abs() + T::constant(eps_prior)).ln();
        }
        logits.push(logit);
    }
    // Shift by the max value: softmax is invariant, exp stays bounded.
    let max = logits
        .iter()
        .map(Scalar::value)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<T> = logits
        .iter()
        .map(|l| (l.clone() - T::constant(max)).exp())
        .collect();
    let total = crate::num::sum(&exps);
    Ok(exps.into_iter().map(|e| e / total.clone()).collect())
}

/// One cross-attention layer over modality representations (all already on
/// the fusion manifold, in fixed modality order). Every modality attends to
/// the others; head outputs merge by weighted Fréchet mean, heads merge by
/// uniform Fréchet mean, then hyperbolic layer norm.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention_layer<T: Scalar>(
    reps: &[LorentzPoint<T>],
    modality_curvatures: &[T],
    params: &FusionLayerParams<T>,
    cfg: &FusionConfig,
    lambda: &T,
    apply_prior: bool,
    frechet: &FrechetConfig,
) -> Result<Vec<LorentzPoint<T>>> {
    if reps.len() < 2 {
        return Err(Error::dim("cross_attention_layer modalities", 2, reps.len()));
    }
    if reps.len() != modality_curvatures.len() {
        return Err(Error::dim(
            "cross_attention_layer curvatures",
            reps.len(),
            modality_curvatures.len(),
        ));
    }
    let mut updated = Vec::with_capacity(reps.len());
    for m in 0..reps.len() {
        let tau = if cfg.curvature_guided {
            curvature_temperature(&modality_curvatures[m], cfg.tau0)?
        } else {
            T::constant(cfg.tau0)
        };
        let mut head_outputs = Vec::with_capacity(params.heads.len());
        for head in &params.heads {
            let q = lorentz_linear(&reps[m], &head.query)?;
            let mut keys = Vec::with_capacity(reps.len() - 1);
            let mut values = Vec::with_capacity(reps.len() - 1);
            let mut key_ks = Vec::with_capacity(reps.len() - 1);
            for (j, rep) in reps.iter().enumerate() {
                if j == m {
                    continue;
                }
                keys.push(lorentz_linear(rep, &head.key)?);
                values.push(lorentz_linear(rep, &head.value)?);
                key_ks.push(modality_curvatures[j].clone());
            }
            let weights = attention_weights(
                &q,
                &keys,
                &key_ks,
                &tau,
                lambda,
                cfg.eps_prior,
                apply_prior && cfg.curvature_guided,
            )?;
            let out = weighted_frechet_mean(&PointBatch::new(values)?, &weights, frechet)?;
            head_outputs.push(out);
        }
        let merged = frechet_mean(&PointBatch::new(head_outputs)?, frechet)?;
        updated.push(hyperbolic_layer_norm(&merged, &params.layer_norm)?);
    }
    Ok(updated)
}

/// Full fusion: run the cross-attention stack (curvature prior in the first
/// layer only), pool the modalities by uniform Fréchet mean, then apply the
/// output projection.
pub fn fuse<T: Scalar>(
    reps: &[LorentzPoint<T>],
    modality_curvatures: &[T],
    params: &FusionParams<T>,
    cfg: &FusionConfig,
    frechet: &FrechetConfig,
) -> Result<LorentzPoint<T>> {
    if reps.is_empty() {
        return Err(Error::Empty("fuse"));
    }
    let lambda = params.lambda();
    let mut current = reps.to_vec();
    for (idx, layer) in params.layers.iter().enumerate() {
        current = cross_attention_layer(
            &current,
            modality_curvatures,
            layer,
            cfg,
            &lambda,
            idx == 0,
            frechet,
        )?;
    }
    let pooled = frechet_mean(&PointBatch::new(current)?, frechet)?;
    lorentz_linear(&pooled, &params.output)
}
