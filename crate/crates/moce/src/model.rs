//! End-to-end mixture-of-curvature-experts model.
//!
//! Pipeline per sample: a small Euclidean encoder per modality, exponential
//! lift onto that modality's learnable-curvature manifold, hyperbolic batch
//! norm with per-domain running statistics, Lorentz activation, a Lorentz
//! linear map (via degenerate single-token concatenation), projection onto
//! the shared fusion manifold (mean curvature), curvature-guided
//! cross-attention fusion, and an HMLR classification head.
//!
//! Trainable parameters are generic over [`Scalar`]; running statistics are
//! plain `f64` buffers updated as a side effect of the forward pass.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::frechet::FrechetConfig;
use crate::fusion::{fuse, fusion_curvature, project_between_manifolds, FusionConfig, FusionParams};
use crate::layers::{
    gaussian, hbn_forward, hyperbolic_concat, lorentz_activation, lorentz_linear, Activation,
    HbnMomentum, HbnState, HmlrParams, LorentzLinearParams,
};
use crate::lorentz::{exp_map_origin, LorentzPoint, PointBatch, MANIFOLD_REL_TOL};
use crate::num::{clamp, Scalar};
use crate::tape::{Tape, Var};
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Initial curvature: one value for all modalities or a per-modality map.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum KInit {
    Shared(f64),
    PerModality(BTreeMap<String, f64>),
}

impl Default for KInit {
    fn default() -> Self {
        KInit::Shared(-2.0)
    }
}

impl KInit {
    pub fn for_modality(&self, name: &str) -> Result<f64> {
        let k = match self {
            KInit::Shared(k) => *k,
            KInit::PerModality(map) => *map
                .get(name)
                .ok_or_else(|| Error::Data(format!("k_init missing modality {name}")))?,
        };
        if !(k < 0.0) || !k.is_finite() {
            return Err(Error::Geometry(format!("k_init must be negative, got {k}")));
        }
        Ok(k)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Manifold feature dimension `d`.
    pub feature_dim: usize,
    /// Hidden width of the toy perceptron encoders.
    pub hidden_dim: usize,
    pub fusion: FusionConfig,
    /// Initial curvature-prior strength (realized through softplus).
    pub lambda_init: f64,
    pub k_init: KInit,
    pub activation: Activation,
    pub hbn_momentum: HbnMomentum,
    /// Solver settings for every Fréchet mean inside the model (tighter
    /// tolerance and a larger iteration budget than the standalone default;
    /// gradient-check setups tighten tol further).
    pub frechet: FrechetConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 6,
            hidden_dim: 16,
            fusion: FusionConfig::default(),
            lambda_init: 0.30,
            k_init: KInit::default(),
            activation: Activation::Elu,
            hbn_momentum: HbnMomentum::default(),
            frechet: FrechetConfig {
                max_iters: 2000,
                tol: 1e-9,
                step: 1.0,
            },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(Error::Parameter("feature_dim must be >= 2".into()));
        }
        if self.hidden_dim < 1 {
            return Err(Error::Parameter("hidden_dim must be >= 1".into()));
        }
        if !(self.lambda_init > 0.0) {
            return Err(Error::Parameter("lambda_init must be > 0".into()));
        }
        self.fusion.validate()?;
        self.frechet.validate()
    }
}

/// One domain-homogeneous mini-batch: `features[modality][sample]` in the
/// model's canonical modality order.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Vec<Vec<Vec<f64>>>,
    pub labels: Vec<u32>,
    pub domain: u32,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Two-layer perceptron with tanh hidden activation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderParams<T> {
    pub w1: Vec<Vec<T>>,
    pub b1: Vec<T>,
    pub w2: Vec<Vec<T>>,
    pub b2: Vec<T>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn map<U: Scalar>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderParams<U> {
        EncoderParams {
            w1: self.w1.iter().map(|r| r.iter().map(&mut *f).collect()).collect(),
            b1: self.b1.iter().map(&mut *f).collect(),
            w2: self.w2.iter().map(|r| r.iter().map(&mut *f).collect()).collect(),
            b2: self.b2.iter().map(&mut *f).collect(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<T>> {
        if self.w1.first().map_or(0, Vec::len) != x.len() {
            return Err(Error::dim("encoder input", self.w1[0].len(), x.len()));
        }
        let hidden: Vec<T> = self
            .w1
            .iter()
            .zip(&self.b1)
            .map(|(row, b)| {
                let mut acc = b.clone();
                for (w, xi) in row.iter().zip(x) {
                    acc = acc + w.clone() * T::constant(*xi);
                }
                acc.tanh()
            })
            .collect();
        Ok(self
            .w2
            .iter()
            .zip(&self.b2)
            .map(|(row, b)| crate::num::dot(row, &hidden) + b.clone())
            .collect())
    }
}

impl EncoderParams<f64> {
    pub fn init(rng: &mut impl rand::Rng, input_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        let s1 = 1.0 / (input_dim as f64).sqrt();
        let s2 = 1.0 / (hidden_dim as f64).sqrt();
        EncoderParams {
            w1: (0..hidden_dim)
                .map(|_| (0..input_dim).map(|_| s1 * gaussian(rng)).collect())
                .collect(),
            b1: vec![0.0; hidden_dim],
            w2: (0..out_dim)
                .map(|_| (0..hidden_dim).map(|_| s2 * gaussian(rng)).collect())
                .collect(),
            b2: vec![0.0; out_dim],
        }
    }
}

/// Per-modality expert: encoder, unconstrained curvature, HBN scale, and the
/// post-normalization Lorentz linear map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertParams<T> {
    pub encoder: EncoderParams<T>,
    /// Realized as `K = -clamp(exp(raw), 0.1, 10)`.
    pub curvature_raw: T,
    pub hbn_gamma: T,
    pub post: LorentzLinearParams<T>,
}

impl<T: Scalar> ExpertParams<T> {
    pub fn curvature(&self) -> T {
        -clamp(self.curvature_raw.exp(), 0.1, 10.0)
    }

    pub fn map<U: Scalar>(&self, f: &mut impl FnMut(&T) -> U) -> ExpertParams<U> {
        ExpertParams {
            encoder: self.encoder.map(f),
            curvature_raw: f(&self.curvature_raw),
            hbn_gamma: f(&self.hbn_gamma),
            post: self.post.map(f),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoceParams<T> {
    /// Ordered like the model's canonical modality list.
    pub experts: Vec<ExpertParams<T>>,
    pub fusion: FusionParams<T>,
    pub head: HmlrParams<T>,
}

impl<T: Scalar> MoceParams<T> {
    /// Single traversal order shared by flatten, lift, and path enumeration:
    /// experts (encoder, curvature, gamma, post), fusion, head.
    pub fn map<U: Scalar>(&self, f: &mut impl FnMut(&T) -> U) -> MoceParams<U> {
        MoceParams {
            experts: self.experts.iter().map(|e| e.map(f)).collect(),
            fusion: self.fusion.map(f),
            head: self.head.map(f),
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

    pub fn count(&self) -> usize {
        self.flat().len()
    }
}

impl MoceParams<f64> {
    pub fn from_flat(&self, flat: &[f64]) -> Result<MoceParams<f64>> {
        let mut it = flat.iter();
        let rebuilt = self.map(&mut |_| *it.next().unwrap_or(&f64::NAN));
        if it.next().is_some() || flat.len() != self.count() {
            return Err(Error::dim("from_flat", self.count(), flat.len()));
        }
        Ok(rebuilt)
    }

    /// Lift onto a tape; the returned leaf variables align with `flat()`.
    pub fn lift(&self, tape: &Tape) -> (MoceParams<Var>, Vec<Var>) {
        let mut vars = Vec::with_capacity(self.count());
        let lifted = self.map(&mut |v: &f64| {
            let var = tape.var(*v);
            vars.push(var.clone());
            var
        });
        (lifted, vars)
    }
}

/// Non-trainable model state: one HBN buffer per modality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoceState {
    pub hbn: Vec<HbnState>,
}

/// Full model: architecture metadata, trainable parameters, and HBN state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoceModel {
    pub config: ModelConfig,
    /// Canonical (sorted) modality order; all batch tensors follow it.
    pub modalities: Vec<String>,
    pub input_dims: Vec<usize>,
    pub classes: usize,
    pub params: MoceParams<f64>,
    pub state: MoceState,
}

impl MoceModel {
    /// Build a fresh model. Modality order is canonicalized by name so logits
    /// do not depend on input map ordering.
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
        if classes < 2 {
            return Err(Error::Parameter("need at least two classes".into()));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = config.feature_dim;
        let modalities: Vec<String> = modality_dims.keys().cloned().collect();
        let input_dims: Vec<usize> = modalities.iter().map(|m| modality_dims[m]).collect();

        let mut experts = Vec::with_capacity(modalities.len());
        let mut hbn = Vec::with_capacity(modalities.len());
        for (name, &input_dim) in modalities.iter().zip(&input_dims) {
            if input_dim == 0 {
                return Err(Error::Parameter(format!("modality {name} has zero input dim")));
            }
            let k = config.k_init.for_modality(name)?;
            if !(Curvilinear::LOW..=Curvilinear::HIGH).contains(&k) {
                return Err(Error::Parameter(format!(
                    "k_init {k} outside learnable range [{}, {}]",
                    Curvilinear::LOW,
                    Curvilinear::HIGH
                )));
            }
            experts.push(ExpertParams {
                encoder: EncoderParams::init(&mut rng, input_dim, config.hidden_dim, d),
                curvature_raw: (-k).ln(),
                hbn_gamma: 1.0,
                post: LorentzLinearParams::init(&mut rng, d, d + 1, Activation::None),
            });
            hbn.push(HbnState::new(d, k, config.hbn_momentum));
        }
        let fusion = FusionParams::init(&mut rng, d, &config.fusion, config.lambda_init);
        let head = HmlrParams::init(&mut rng, classes, d);
        Ok(MoceModel {
            config,
            modalities,
            input_dims,
            classes,
            params: MoceParams {
                experts,
                fusion,
                head,
            },
            state: MoceState { hbn },
        })
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m == name)
    }

    /// Stable dotted path per flat parameter index (for gradient errors).
    pub fn param_paths(&self) -> Vec<String> {
        let mut paths = Vec::with_capacity(self.params.count());
        for (name, e) in self.modalities.iter().zip(&self.params.experts) {
            push_matrix(&mut paths, &format!("expert.{name}.encoder.w1"), &e.encoder.w1);
            push_vec(&mut paths, &format!("expert.{name}.encoder.b1"), &e.encoder.b1);
            push_matrix(&mut paths, &format!("expert.{name}.encoder.w2"), &e.encoder.w2);
            push_vec(&mut paths, &format!("expert.{name}.encoder.b2"), &e.encoder.b2);
            paths.push(format!("expert.{name}.curvature_raw"));
            paths.push(format!("expert.{name}.hbn_gamma"));
            push_matrix(&mut paths, &format!("expert.{name}.post.weight"), &e.post.weight);
            push_vec(&mut paths, &format!("expert.{name}.post.bias"), &e.post.bias);
        }
        paths.push("fusion.lambda_raw".into());
        for (l, layer) in self.params.fusion.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                for (tag, lin) in [("q", &head.query), ("k", &head.key), ("v", &head.value)] {
                    push_matrix(&mut paths, &format!("fusion.layer{l}.head{h}.{tag}.weight"), &lin.weight);
                    push_vec(&mut paths, &format!("fusion.layer{l}.head{h}.{tag}.bias"), &lin.bias);
                }
            }
            push_vec(&mut paths, &format!("fusion.layer{l}.norm.scale"), &layer.layer_norm.scale);
            push_vec(&mut paths, &format!("fusion.layer{l}.norm.shift"), &layer.layer_norm.shift);
        }
        push_matrix(&mut paths, "fusion.output.weight", &self.params.fusion.output.weight);
        push_vec(&mut paths, "fusion.output.bias", &self.params.fusion.output.bias);
        for (c, class) in self.params.head.classes.iter().enumerate() {
            paths.push(format!("head.class{c}.offset"));
            push_vec(&mut paths, &format!("head.class{c}.direction"), &class.direction);
        }
        debug_assert_eq!(paths.len(), self.params.count());
        paths
    }

    /// Forward pass over one batch, producing per-sample logits. Mutates the
    /// HBN state: training commits running updates, eval commits test-time
    /// adaptation (callers that must not persist it pass a cloned state).
    pub fn batch_logits<T: Scalar>(
        &self,
        params: &MoceParams<T>,
        state: &mut MoceState,
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
        let frechet = &self.config.frechet;

        // Experts: per modality, encode + lift + HBN + activation + linear.
        let mut modality_reps: Vec<Vec<LorentzPoint<T>>> = Vec::with_capacity(self.modalities.len());
        let mut modality_ks: Vec<T> = Vec::with_capacity(self.modalities.len());
        for (m, expert) in self.params.experts.iter().enumerate() {
            let _ = expert;
            let expert = &params.experts[m];
            if batch.features[m].len() != n {
                return Err(Error::dim("batch rows", n, batch.features[m].len()));
            }
            let k = expert.curvature();
            let lifted: Vec<LorentzPoint<T>> = batch.features[m]
                .iter()
                .map(|x| {
                    let encoded = expert.encoder.forward(x)?;
                    exp_map_origin(&encoded, k.clone())
                })
                .collect::<Result<_>>()?;
            debug_assert!(lifted
                .iter()
                .all(|p| p.constraint_residual() < residual_tol(k.value())));
            let point_batch = PointBatch::new(lifted)?;
            let (normalized, stats) = hbn_forward(
                &point_batch,
                &expert.hbn_gamma,
                batch.domain,
                &self.state.hbn[m],
                training,
                frechet,
            )?;
            if training {
                state.hbn[m].update_running(batch.domain, &stats.mean, stats.variance, epoch)?;
            } else {
                state.hbn[m].domains.insert(
                    batch.domain,
                    crate::layers::DomainStats {
                        mean: stats.mean.coords().to_vec(),
                        variance: stats.variance,
                    },
                );
            }
            let reps: Vec<LorentzPoint<T>> = normalized
                .into_iter()
                .map(|p| {
                    let activated = lorentz_activation(&p, self.config.activation);
                    // Degenerate single-token pooling: concat of one point,
                    // then the expert's Lorentz linear map.
                    let pooled = hyperbolic_concat(std::slice::from_ref(&activated))?;
                    lorentz_linear(&pooled, &expert.post)
                })
                .collect::<Result<_>>()?;
            debug_assert!(reps
                .iter()
                .all(|p| p.constraint_residual() < residual_tol(k.value())));
            modality_reps.push(reps);
            modality_ks.push(k);
        }

        // Shared fusion manifold.
        let k_f = fusion_curvature(&modality_ks)?;
        let mut logits = Vec::with_capacity(n);
        for i in 0..n {
            let projected: Vec<LorentzPoint<T>> = modality_reps
                .iter()
                .map(|reps| project_between_manifolds(&reps[i], k_f.clone()))
                .collect::<Result<_>>()?;
            debug_assert!(projected
                .iter()
                .all(|p| p.constraint_residual() < residual_tol(k_f.value())));
            let fused = fuse(
                &projected,
                &modality_ks,
                &params.fusion,
                &self.config.fusion,
                frechet,
            )?;
            debug_assert!(fused.constraint_residual() < residual_tol(k_f.value()));
            logits.push(crate::layers::hmlr_logits(&fused, &params.head)?);
        }
        Ok(logits)
    }

    /// Mean cross-entropy over the batch.
    pub fn batch_loss<T: Scalar>(
        &self,
        params: &MoceParams<T>,
        state: &mut MoceState,
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

    /// Eval-mode predictions over a batch sequence. Test-time adaptation runs
    /// on an internal clone of the state, so `self` is untouched and repeated
    /// calls are identical.
    pub fn predict(&self, batches: &[Batch]) -> Result<Vec<u32>> {
        let mut scratch = self.state.clone();
        let mut out = Vec::new();
        for batch in batches {
            let logits = self.batch_logits(&self.params, &mut scratch, batch, false, 0)?;
            out.extend(logits.iter().map(|l| argmax(l)));
        }
        Ok(out)
    }

    /// Per-sample logits in eval mode (single-sample batch).
    pub fn forward_sample(&self, features: &BTreeMap<String, Vec<f64>>, domain: u32) -> Result<Vec<f64>> {
        let mut ordered = Vec::with_capacity(self.modalities.len());
        for name in &self.modalities {
            let x = features
                .get(name)
                .ok_or_else(|| Error::Data(format!("missing modality {name}")))?;
            ordered.push(vec![x.clone()]);
        }
        let batch = Batch {
            features: ordered,
            labels: vec![0],
            domain,
        };
        let mut scratch = self.state.clone();
        let logits = self.batch_logits(&self.params, &mut scratch, &batch, false, 0)?;
        Ok(logits.into_iter().next().expect("one sample"))
    }

    /// Realized curvature per modality, in canonical order.
    pub fn curvatures(&self) -> Vec<(String, f64)> {
        self.modalities
            .iter()
            .zip(&self.params.experts)
            .map(|(name, e)| (name.clone(), e.curvature()))
            .collect()
    }

    pub fn lambda(&self) -> f64 {
        self.params.fusion.lambda()
    }

    /// Post-step maintenance: clamp the raw curvature into the learnable
    /// range and rescale HBN running statistics to the new curvature values.
    pub fn after_step(&mut self) -> Result<()> {
        for (expert, hbn) in self.params.experts.iter_mut().zip(&mut self.state.hbn) {
            expert.curvature_raw = expert
                .curvature_raw
                .clamp(Curvilinear::RAW_LOW, Curvilinear::RAW_HIGH);
            let k = expert.curvature();
            hbn.rescale_curvature(k)?;
        }
        Ok(())
    }
}

/// Learnable curvature bounds and their raw-space images.
struct Curvilinear;

impl Curvilinear {
    const LOW: f64 = -10.0;
    const HIGH: f64 = -0.1;
    const RAW_LOW: f64 = -2.302585092994046; // ln 0.1
    const RAW_HIGH: f64 = 2.302585092994046; // ln 10
}

fn residual_tol(k: f64) -> f64 {
    MANIFOLD_REL_TOL * (1.0 / k).abs().max(1.0)
}

fn push_matrix(paths: &mut Vec<String>, prefix: &str, m: &[Vec<f64>]) {
    for (i, row) in m.iter().enumerate() {
        for j in 0..row.len() {
            paths.push(format!("{prefix}[{i}][{j}]"));
        }
    }
}

fn push_vec(paths: &mut Vec<String>, prefix: &str, v: &[f64]) {
    for i in 0..v.len() {
        paths.push(format!("{prefix}[{i}]"));
    }
}

pub fn argmax<T: Scalar>(xs: &[T]) -> u32 {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if x.value() > xs[best].value() {
            best = i;
        }
    }
    best as u32
}

/// Softmax cross-entropy of one logit vector against an integer label.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: u32) -> Result<T> {
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    if label as usize >= logits.len() {
        return Err(Error::Parameter(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits
        .iter()
        .map(Scalar::value)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = T::constant(0.0);
    for l in logits {
        sum = sum + (l.clone() - T::constant(max)).exp();
    }
    let lse = T::constant(max) + sum.ln();
    Ok(lse - logits[label as usize].clone())
}

// ---------------------------------------------------------------------------
// Checkpoint serialization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: MoceModel,
}

impl MoceModel {
    pub fn to_checkpoint_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: self.clone(),
        };
        let mut s = serde_json::to_string_pretty(&ckpt)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        // Probe the version first so mismatches are reported as such rather
        // than as schema noise.
        #[derive(Deserialize)]
        struct VersionProbe {
            format_version: u32,
        }
        let probe: VersionProbe = serde_json::from_str(text)?;
        if probe.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Version {
                found: probe.format_version,
                supported: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        ckpt.model.config.validate()?;
        Ok(ckpt.model)
    }
}
