//! Reverse-mode gradients vs central finite differences, layer by layer and
//! for the full model. Every probe is a scalar function of a parameter
//! vector, written once generically and evaluated both on plain values (for
//! the difference quotient) and on tape variables (for the sweep).

use moce::frechet::{weighted_frechet_mean, FrechetConfig};
use moce::fusion::{attention_weights, curvature_temperature, fusion_curvature, project_between_manifolds};
use moce::layers::{
    hbn_forward, hyperbolic_concat, hyperbolic_layer_norm, lorentz_activation, lorentz_linear,
    Activation, HbnMomentum, HbnState, HmlrClass, HmlrParams, LayerNormParams, LorentzLinearParams,
};
use moce::lorentz::{exp_map_origin, LorentzPoint, PointBatch};
use moce::model::cross_entropy;
use moce::num::{central_difference_gradient, clamp, softplus, Scalar};
use moce::tape::Tape;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Evaluate a generic probe on values and on tape, compare gradients.
fn check<FV, FT>(name: &str, x0: &[f64], value_probe: FV, tape_probe: FT)
where
    FV: Fn(&[f64]) -> f64,
    FT: Fn(&[moce::tape::Var]) -> moce::tape::Var,
{
    let fd = central_difference_gradient(|x| value_probe(x), x0, H);
    let tape = Tape::new();
    let vars: Vec<moce::tape::Var> = x0.iter().map(|&v| tape.var(v)).collect();
    let out = tape_probe(&vars);
    assert!(
        (out.value() - value_probe(x0)).abs() <= 1e-10 * out.value().abs().max(1.0),
        "{name}: primal mismatch"
    );
    let grads = out.backward();
    let mut worst = 0.0f64;
    for (i, fd_i) in fd.iter().enumerate() {
        let ad_i = grads.wrt(&vars[i]);
        let e = rel_err(ad_i, *fd_i);
        if e > worst {
            worst = e;
        }
        assert!(
            e < TOL,
            "{name}: param {i} ad={ad_i} fd={fd_i} rel={e:.3e}"
        );
    }
    println!("{name}: max rel err {worst:.3e} over {} params", x0.len());
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * (rng.random::<f64>() - 0.5)).collect()
}

// Probes are generic over the scalar so values and tape share one body.

fn probe_linear_activation<T: Scalar>(x: &[T]) -> T {
    // Layout: k_raw, point space (3), W (2x4), b (2).
    let k = -clamp(x[0].exp(), 0.1, 10.0);
    let p = exp_map_origin(&x[1..4], k).unwrap();
    let params = LorentzLinearParams {
        weight: vec![x[4..8].to_vec(), x[8..12].to_vec()],
        bias: x[12..14].to_vec(),
        activation: Activation::Elu,
    };
    let out = lorentz_linear(&p, &params).unwrap();
    let act = lorentz_activation(&out, Activation::Elu);
    let c = [0.7, -0.4, 0.9];
    let mut acc = T::constant(0.0);
    for (ci, coord) in c.iter().zip(act.coords()) {
        acc = acc + T::constant(*ci) * coord.clone();
    }
    acc
}

fn probe_concat_norm<T: Scalar>(x: &[T]) -> T {
    // Two 3-dim points -> concat (6-dim) -> layer norm with affine params.
    let k = T::constant(-1.3);
    let a = exp_map_origin(&x[0..3], k.clone()).unwrap();
    let b = exp_map_origin(&x[3..6], k.clone()).unwrap();
    let cat = hyperbolic_concat(&[a, b]).unwrap();
    let ln = LayerNormParams {
        scale: x[6..12].to_vec(),
        shift: x[12..18].to_vec(),
    };
    let out = hyperbolic_layer_norm(&cat, &ln).unwrap();
    let c = [0.3, -0.8, 0.5, 0.2, -0.6, 0.4, 0.9];
    let mut acc = T::constant(0.0);
    for (ci, coord) in c.iter().zip(out.coords()) {
        acc = acc + T::constant(*ci) * coord.clone();
    }
    acc
}

fn probe_hbn<T: Scalar>(x: &[T]) -> T {
    // gamma, k_raw, then 4 points x 3 space coords. Training-mode HBN, which
    // differentiates through the batch Fréchet mean iteration.
    let gamma = x[0].clone();
    let k = -clamp(x[1].exp(), 0.1, 10.0);
    let points: Vec<LorentzPoint<T>> = (0..4)
        .map(|i| exp_map_origin(&x[2 + 3 * i..5 + 3 * i], k.clone()).unwrap())
        .collect();
    let batch = PointBatch::new(points).unwrap();
    let state = HbnState::new(3, k.value(), HbnMomentum::default());
    let frechet = FrechetConfig {
        max_iters: 300,
        tol: 1e-11,
        step: 1.0,
    };
    let (outs, _) = hbn_forward(&batch, &gamma, 0, &state, true, &frechet).unwrap();
    let mut acc = T::constant(0.0);
    for (j, p) in outs.iter().enumerate() {
        for (i, coord) in p.coords().iter().enumerate() {
            acc = acc + T::constant(0.1 * (i as f64 + 1.0) - 0.07 * j as f64) * coord.clone();
        }
    }
    acc
}

fn probe_frechet<T: Scalar>(x: &[T]) -> T {
    // Weighted mean of three points; weights through softplus, plus curvature.
    let k = -clamp(x[0].exp(), 0.1, 10.0);
    let weights: Vec<T> = x[1..4].iter().map(|w| softplus(w.clone())).collect();
    let points: Vec<LorentzPoint<T>> = (0..3)
        .map(|i| exp_map_origin(&x[4 + 3 * i..7 + 3 * i], k.clone()).unwrap())
        .collect();
    let mu = weighted_frechet_mean(
        &PointBatch::new(points).unwrap(),
        &weights,
        &FrechetConfig {
            max_iters: 300,
            tol: 1e-11,
            step: 1.0,
        },
    )
    .unwrap();
    let c = [0.5, -0.3, 0.8, 0.2];
    let mut acc = T::constant(0.0);
    for (ci, coord) in c.iter().zip(mu.coords()) {
        acc = acc + T::constant(*ci) * coord.clone();
    }
    acc
}

fn probe_attention<T: Scalar>(x: &[T]) -> T {
    // lambda_raw, two modality raw curvatures, query + two keys (3 coords each).
    let lambda = softplus(x[0].clone());
    let k1 = -clamp(x[1].exp(), 0.1, 10.0);
    let k2 = -clamp(x[2].exp(), 0.1, 10.0);
    let kf = fusion_curvature(&[k1.clone(), k2.clone()]).unwrap();
    let q = exp_map_origin(&x[3..6], kf.clone()).unwrap();
    let key1 = project_between_manifolds(&exp_map_origin(&x[6..9], k1.clone()).unwrap(), kf.clone()).unwrap();
    let key2 = project_between_manifolds(&exp_map_origin(&x[9..12], k2.clone()).unwrap(), kf.clone()).unwrap();
    let tau = curvature_temperature(&k1, 0.8).unwrap();
    let w = attention_weights(&q, &[key1, key2], &[k1, k2], &tau, &lambda, 1e-6, true).unwrap();
    w[0].clone() * T::constant(1.7) + w[1].clone() * T::constant(-0.6)
}

fn probe_hmlr_ce<T: Scalar>(x: &[T]) -> T {
    // Two classes: offsets + 3-dim directions, plus a 3-dim input point.
    let point = exp_map_origin(&x[0..3], T::constant(-2.0)).unwrap();
    let params = HmlrParams {
        classes: vec![
            HmlrClass {
                offset: x[3].clone(),
                direction: x[4..7].to_vec(),
            },
            HmlrClass {
                offset: x[7].clone(),
                direction: x[8..11].to_vec(),
            },
        ],
    };
    let logits = moce::layers::hmlr_logits(&point, &params).unwrap();
    cross_entropy(&logits, 1).unwrap()
}

#[test]
fn layer_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    let mut x = vec![0.4];
    x.extend(rand_vec(&mut rng, 13, 1.2));
    check("lorentz_linear+activation", &x, |v| probe_linear_activation::<f64>(v), |v| {
        probe_linear_activation(v)
    });

    let x = rand_vec(&mut rng, 18, 1.0);
    // Keep layer-norm scales away from zero.
    let x: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, v)| if (6..12).contains(&i) { v + 1.5 } else { *v })
        .collect();
    check("concat+layer_norm", &x, |v| probe_concat_norm::<f64>(v), |v| probe_concat_norm(v));

    let mut x = vec![1.1, 0.3];
    x.extend(rand_vec(&mut rng, 12, 1.0));
    check("hbn_training", &x, |v| probe_hbn::<f64>(v), |v| probe_hbn(v));

    let mut x = vec![0.2, 0.5, -0.3, 0.8];
    x.extend(rand_vec(&mut rng, 9, 1.1));
    check("weighted_frechet_mean", &x, |v| probe_frechet::<f64>(v), |v| probe_frechet(v));

    let mut x = vec![-0.8, 0.4, -0.2];
    x.extend(rand_vec(&mut rng, 9, 1.0));
    check("attention+projection", &x, |v| probe_attention::<f64>(v), |v| probe_attention(v));

    let mut x = rand_vec(&mut rng, 11, 1.0);
    // Keep directions clearly non-zero.
    for i in [4usize, 8] {
        x[i] += 1.0;
    }
    check("hmlr+cross_entropy", &x, |v| probe_hmlr_ce::<f64>(v), |v| probe_hmlr_ce(v));
}

#[test]
fn tiny_full_model_gradients_match_finite_differences() {
    use moce::model::{Batch, KInit, ModelConfig, MoceModel};
    use moce::train::{finite_difference_gradient, gradient};
    use std::collections::BTreeMap;

    let mut dims = BTreeMap::new();
    dims.insert("a".to_string(), 3);
    dims.insert("b".to_string(), 3);
    let config = ModelConfig {
        feature_dim: 4,
        hidden_dim: 4,
        fusion: moce::fusion::FusionConfig {
            heads: 1,
            layers: 1,
            ..Default::default()
        },
        k_init: KInit::Shared(-1.5),
        frechet: FrechetConfig {
            max_iters: 300,
            tol: 1e-11,
            step: 1.0,
        },
        ..ModelConfig::default()
    };
    let model = MoceModel::new(config, &dims, 2, 11).unwrap();
    let n_params = model.params.count();
    assert!(n_params <= 500, "tiny instance budget exceeded: {n_params}");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = Batch {
        features: vec![
            (0..6).map(|_| rand_vec(&mut rng, 3, 2.0)).collect(),
            (0..6).map(|_| rand_vec(&mut rng, 3, 2.0)).collect(),
        ],
        labels: vec![0, 1, 0, 1, 1, 0],
        domain: 0,
    };

    let ad = gradient(&model, &batch, 0).unwrap();
    let fd = finite_difference_gradient(&model, &batch, 0, H).unwrap();
    let paths = moce::train::TrainableModel::param_paths(&model);
    let mut worst = (0.0f64, String::new());
    for ((a, f), path) in ad.iter().zip(&fd).zip(&paths) {
        let e = rel_err(*a, *f);
        if e > worst.0 {
            worst = (e, path.clone());
        }
        assert!(e < TOL, "{path}: ad={a} fd={f} rel={e:.3e}");
    }
    println!(
        "full model: {} params, worst rel err {:.3e} at {}",
        n_params, worst.0, worst.1
    );
}
