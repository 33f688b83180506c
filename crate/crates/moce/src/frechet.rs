//! Weighted Fréchet mean and variance on the Lorentz manifold.
//!
//! The mean minimizes `sum_i w_i d^2(q, p_i)` over manifold points `q`,
//! found by a guarded Riemannian Newton iteration on the weighted
//! tangent-space average (the Riemannian gradient), run until the gradient
//! norm drops below tolerance.
//!
//! Resolution limit: ambient hyperboloid coordinates grow like
//! `exp(sqrt(-K) r)` at radius `r`, so the computed gradient carries float
//! noise of roughly `exp(2 sqrt(-K) r_max) * 1e-16`. Tolerances below that
//! floor are unreachable and reported as non-convergence; keep
//! `sqrt(-K) * r` under about 6 for 1e-9 tolerances.

use crate::error::{Error, Result};
use crate::lorentz::{exp_map, geodesic_distance, log_map, LorentzPoint, PointBatch};
use crate::num::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FrechetConfig {
    pub max_iters: usize,
    /// Riemannian gradient-norm threshold.
    pub tol: f64,
    /// Initial step size in (0, 1]; halved on objective increase.
    pub step: f64,
}

impl Default for FrechetConfig {
    fn default() -> Self {
        FrechetConfig {
            max_iters: 100,
            tol: 1e-8,
            step: 1.0,
        }
    }
}

impl FrechetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::Parameter("FrechetConfig.max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Parameter("FrechetConfig.tol must be > 0".into()));
        }
        if !(self.step > 0.0 && self.step <= 1.0) {
            return Err(Error::Parameter("FrechetConfig.step must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Lorentz norm of the weighted tangent mean at `q` (the gradient norm used
/// by the near-optimum acceptance check).
fn tangent_norm_at<T: Scalar>(
    q: &LorentzPoint<T>,
    batch: &PointBatch<T>,
    weights: &[T],
    wsum: &T,
) -> Result<f64> {
    let mut tangent = vec![T::constant(0.0); q.coords().len()];
    for (p, w) in batch.points().iter().zip(weights) {
        let lg = log_map(q, p)?;
        for (t, c) in tangent.iter_mut().zip(lg.coords()) {
            *t = t.clone() + w.clone() * c.clone();
        }
    }
    for t in tangent.iter_mut() {
        *t = t.clone() / wsum.clone();
    }
    let v = crate::lorentz::TangentVector::new(q.clone(), tangent)?;
    Ok(v.norm_sq().value().max(0.0).sqrt())
}

/// Gaussian elimination with partial (value) pivoting; generic over the
/// scalar so the Newton solve stays differentiable.
fn solve_linear<T: Scalar>(mut a: Vec<Vec<T>>, mut b: Vec<T>) -> Result<Vec<T>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                a[i][col]
                    .value()
                    .abs()
                    .partial_cmp(&a[j][col].value().abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .expect("non-empty column");
        if a[pivot][col].value().abs() < 1e-300 {
            return Err(Error::Geometry("singular Newton system".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let factor = a[row][col].clone() / a[col][col].clone();
            for k in col..n {
                a[row][k] = a[row][k].clone() - factor.clone() * a[col][k].clone();
            }
            b[row] = b[row].clone() - factor * b[col].clone();
        }
    }
    let mut x = vec![T::constant(0.0); n];
    for row in (0..n).rev() {
        let mut acc = b[row].clone();
        for k in (row + 1)..n {
            acc = acc - a[row][k].clone() * x[k].clone();
        }
        x[row] = acc / a[row][row].clone();
    }
    Ok(x)
}

/// `lam(a) = a coth(a)`, the per-point Hessian bound of half the squared
/// distance at geodesic distance `a / sqrt(-K)`.
fn lam<T: Scalar>(a: T) -> T {
    let v = a.value();
    if v < 1e-6 {
        // Series around zero; exact limit lam(0) = 1.
        T::constant(1.0) + a.clone() * a / T::constant(3.0)
    } else if v > 30.0 {
        // coth saturates at 1 well below overflow territory.
        a
    } else {
        a.clone() * a.clone().cosh() / a.sinh()
    }
}

fn objective<T: Scalar>(
    mu: &LorentzPoint<T>,
    batch: &PointBatch<T>,
    weights: &[T],
    total: &T,
) -> Result<T> {
    let mut acc = T::constant(0.0);
    for (p, w) in batch.points().iter().zip(weights) {
        let d = geodesic_distance(mu, p)?;
        acc = acc + w.clone() * d.clone() * d;
    }
    Ok(acc / total.clone())
}

/// Weighted Fréchet mean by Karcher iteration, initialized at the point of
/// largest weight (ties: lowest index).
pub fn weighted_frechet_mean<T: Scalar>(
    batch: &PointBatch<T>,
    weights: &[T],
    cfg: &FrechetConfig,
) -> Result<LorentzPoint<T>> {
    cfg.validate()?;
    if weights.len() != batch.len() {
        return Err(Error::dim("weighted_frechet_mean weights", batch.len(), weights.len()));
    }
    let mut total = 0.0;
    for w in weights {
        if w.value() < 0.0 {
            return Err(Error::Parameter(format!(
                "Fréchet weights must be non-negative, got {}",
                w.value()
            )));
        }
        total += w.value();
    }
    if !(total > 0.0) {
        return Err(Error::Parameter("Fréchet weights must have positive sum".into()));
    }
    let wsum = crate::num::sum(weights);

    let init = weights
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| {
            a.value()
                .partial_cmp(&b.value())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(j.cmp(i)) // ties: lowest index wins
        })
        .map(|(i, _)| i)
        .expect("non-empty batch");
    // Recenter far-out clouds: ambient coordinates grow exponentially with
    // the distance from the origin, and with them the float noise of every
    // inner product. Gyro-translating the batch so the initial iterate sits
    // at the origin is an exact isometry and keeps coordinates of
    // concentrated clouds O(exp(diameter)) instead of O(exp(radius)).
    let smk_v = (-batch.curvature().value()).sqrt();
    // sqrt(-K) * d(o, init) = acosh(sqrt(-K) * t_init).
    let origin_gap = (smk_v * batch.points()[init].time().value()).max(1.0).acosh();
    if origin_gap > 1.0 {
        let shift = batch.points()[init].clone();
        let inv = crate::lorentz::gyro_inverse(&shift);
        let translated: Vec<LorentzPoint<T>> = batch
            .points()
            .iter()
            .map(|p| crate::lorentz::gyro_add(&inv, p))
            .collect::<Result<_>>()?;
        let work = PointBatch::new(translated)?;
        let mu = weighted_frechet_mean(&work, weights, cfg)?;
        return crate::lorentz::gyro_add(&shift, &mu);
    }

    let mut mu = batch.points()[init].clone();
    let smk = (-batch.curvature().clone()).sqrt();
    let ambient = mu.coords().len();

    // Riemannian Newton iteration. On T_mu the Hessian of the normalized
    // objective (1/2) sum_i w_i d^2(mu, p_i) / sum_i w_i is
    //   H = sum_i w_i [ u_i<u_i,.>_L + lam_i (Id - u_i<u_i,.>_L) ] / sum_i w_i,
    // with u_i the unit tangent toward p_i and lam_i = a_i coth(a_i) at
    // a_i = sqrt(-K) d_i; eigenvalues lie in [1, max lam_i], so the system is
    // uniformly positive definite. A plain 1/max-lam damped step is provably
    // decreasing but crawls along the radial eigendirection for spread
    // batches; the Newton solve removes that anisotropy. Step halving on a
    // gradient-norm check guards the far-from-optimum phase.
    // The inner-product route resolves positions only down to about
    // sqrt(2 eps)/sqrt(-K) (~4.5e-8/sqrt(-K)); below that scale the iterate
    // is the mean at f64 resolution.
    let cluster_eps = 1e-7 / smk_v;

    let mut grad_norm = f64::INFINITY;
    for _ in 0..cfg.max_iters {
        // Gradient (weighted tangent mean) and the ambient Hessian operator
        // A = lam_bar I + sum_i wn_i (1 - lam_i) u_i (G u_i)^T, where G is
        // the Lorentz signature flip. A preserves T_mu and acts as lam_bar
        // on the normal direction, so the ambient solve is well posed.
        let mut tangent = vec![T::constant(0.0); ambient];
        let mut a_mat = vec![vec![T::constant(0.0); ambient]; ambient];
        let mut lam_bar = T::constant(0.0);
        let mut dmax = 0.0f64;
        for (p, w) in batch.points().iter().zip(weights) {
            let wn = w.clone() / wsum.clone();
            let lg = log_map(&mu, p)?;
            let dsq = lg.norm_sq();
            dmax = dmax.max(dsq.value().max(0.0).sqrt());
            for (t, c) in tangent.iter_mut().zip(lg.coords()) {
                *t = t.clone() + wn.clone() * c.clone();
            }
            if dsq.value() > 1e-30 {
                let d = dsq.sqrt();
                let lam_i = lam(smk.clone() * d.clone());
                lam_bar = lam_bar + wn.clone() * lam_i.clone();
                let coeff = wn * (T::constant(1.0) - lam_i);
                let unit: Vec<T> = lg.coords().iter().map(|c| c.clone() / d.clone()).collect();
                for (r, row) in a_mat.iter_mut().enumerate() {
                    for (c, cell) in row.iter_mut().enumerate() {
                        let guc = if c == 0 { -unit[c].clone() } else { unit[c].clone() };
                        *cell = cell.clone() + coeff.clone() * unit[r].clone() * guc;
                    }
                }
            } else {
                lam_bar = lam_bar + wn;
            }
        }
        for (r, row) in a_mat.iter_mut().enumerate() {
            row[r] = row[r].clone() + lam_bar.clone();
        }

        let gradient = crate::lorentz::TangentVector::new(mu.clone(), tangent)?;
        grad_norm = gradient.norm_sq().value().max(0.0).sqrt();
        if grad_norm < cfg.tol || dmax < cluster_eps {
            return Ok(mu);
        }
        #[cfg(feature = "solver-debug")]
        eprintln!("  iter: grad {grad_norm:.6e}");

        // Acceptance works on two signals. Far from the optimum the
        // objective must drop (prevents Newton overshoot divergence). Close
        // in, objective changes sink below float noise while the gradient
        // norm still resolves progress, so a clear gradient decrease also
        // accepts a noise-neutral move.
        let current = objective(&mu, batch, weights, &wsum)?.value();
        // Summation noise grows with the term count; stay well above it so
        // near-optimal candidates reach the gradient check instead of being
        // rejected on objective jitter.
        let noise = 32.0 * batch.len() as f64 * f64::EPSILON * current.abs().max(1.0);
        let mut try_move = |dir: &crate::lorentz::TangentVector<T>,
                            start: f64,
                            halvings: usize,
                            mu: &mut LorentzPoint<T>|
         -> Result<bool> {
            let mut scale = start;
            for _ in 0..halvings {
                let next = exp_map(&dir.scale(T::constant(scale)))?;
                let obj_next = objective(&next, batch, weights, &wsum)?.value();
                let accept = if obj_next < current - noise {
                    true
                } else if obj_next <= current + noise {
                    tangent_norm_at(&next, batch, weights, &wsum)? < 0.999 * grad_norm
                } else {
                    false
                };
                if accept {
                    *mu = next;
                    return Ok(true);
                }
                scale *= 0.5;
            }
            Ok(false)
        };

        let newton = solve_linear(a_mat, gradient.coords().to_vec())?;
        let direction = crate::lorentz::TangentVector::new(mu.clone(), newton)?;
        // The beta = K<p,q> route cannot place points more precisely than
        // about sqrt(2 eps)/sqrt(-K); a Newton move below that is already
        // within representation error of the true mean.
        if direction.norm_sq().value().max(0.0).sqrt() < cluster_eps {
            return Ok(mu);
        }
        if !try_move(&direction, cfg.step, 20, &mut mu)? {
            // Fallback: damped gradient direction (step 1/lam_bar bounds the
            // Hessian spectrum, halving handles segment effects).
            try_move(&gradient, cfg.step / lam_bar.value(), 40, &mut mu)?;
        }
    }

    #[cfg(feature = "solver-debug")]
    {
        let dists: Vec<f64> = batch
            .points()
            .iter()
            .map(|p| log_map(&mu, p).map(|l| l.norm().value()).unwrap_or(f64::NAN))
            .collect();
        let ws: Vec<f64> = weights.iter().map(Scalar::value).collect();
        eprintln!(
            "frechet stall: grad {grad_norm:.3e} K {} dists {dists:?} weights {ws:?}",
            batch.curvature().value()
        );
    }
    Err(Error::Convergence {
        iters: cfg.max_iters,
        grad_norm,
        last_iterate: mu.coords().iter().map(Scalar::value).collect(),
    })
}

/// Fréchet mean with uniform weights.
pub fn frechet_mean<T: Scalar>(batch: &PointBatch<T>, cfg: &FrechetConfig) -> Result<LorentzPoint<T>> {
    let w = vec![T::constant(1.0); batch.len()];
    weighted_frechet_mean(batch, &w, cfg)
}

/// Weight-normalized Fréchet variance `sum_i w_i d^2(mean, p_i) / sum_i w_i`.
pub fn frechet_variance<T: Scalar>(
    batch: &PointBatch<T>,
    weights: &[T],
    mean: &LorentzPoint<T>,
) -> Result<T> {
    if weights.len() != batch.len() {
        return Err(Error::dim("frechet_variance weights", batch.len(), weights.len()));
    }
    mean.same_manifold(&batch.points()[0])?;
    let wsum = crate::num::sum(weights);
    objective(mean, batch, weights, &wsum)
}
