//! Lorentz (hyperboloid) model primitives.
//!
//! Points live on the upper sheet `{ p : <p,p>_L = 1/K, p_t > 0 }` of a
//! two-sheeted hyperboloid in Minkowski space, with Lorentzian inner product
//! `<p,q>_L = p_s . q_s - p_t q_t` and constant sectional curvature `K < 0`.
//! Coordinates are stored time-first: `p = [p_t, p_s]`.
//!
//! Everything here is generic over [`Scalar`], so the same closed forms serve
//! plain evaluation and reverse-mode differentiation, including gradients with
//! respect to the curvature itself.

use crate::error::{Error, Result};
use crate::num::{clamp_min, norm_sq, Scalar};
use serde::{Deserialize, Serialize};

/// Relative tolerance for the hyperboloid constraint `<p,p>_L = 1/K`.
pub const MANIFOLD_REL_TOL: f64 = 1e-9;

/// Below this Lorentz norm a tangent vector is treated as zero in `exp_map`.
pub const EXP_SMALL_NORM: f64 = 1e-12;

/// `log_map` treats `K<p,q>_L <= 1 + COINCIDENT_EPS` as coincident points.
/// This sits at the f64 resolution of the inner product around 1; between it
/// and [`LOG_SERIES_EPS`] the scaling factor `acosh(b)/sqrt(b^2-1)` is
/// evaluated by series to avoid the 0/0.
pub const COINCIDENT_EPS: f64 = 1e-15;

/// Below this `b - 1`, `acosh(b)/sqrt(b^2-1)` uses its Taylor expansion.
pub const LOG_SERIES_EPS: f64 = 1e-8;

/// A validated constant negative curvature.
///
/// Used at configuration and reporting boundaries; inside generic compute the
/// curvature travels as a bare scalar so gradients can flow through it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Curvature(f64);

impl Curvature {
    /// Bounds enforced when the curvature is a learnable parameter.
    pub const LEARNABLE_MIN: f64 = -10.0;
    pub const LEARNABLE_MAX: f64 = -0.1;

    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite("curvature"));
        }
        if value >= 0.0 {
            return Err(Error::Geometry(format!(
                "curvature must be strictly negative, got {value}"
            )));
        }
        Ok(Curvature(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn in_learnable_range(self) -> bool {
        (Self::LEARNABLE_MIN..=Self::LEARNABLE_MAX).contains(&self.0)
    }
}

/// Lorentzian inner product `p_s . q_s - p_t q_t` on raw coordinate slices.
pub fn lorentz_inner<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::dim("lorentz_inner", p.len(), q.len()));
    }
    if p.len() < 2 {
        return Err(Error::dim("lorentz_inner", 2, p.len()));
    }
    let mut acc = -(p[0].clone() * q[0].clone());
    for (a, b) in p[1..].iter().zip(&q[1..]) {
        acc = acc + a.clone() * b.clone();
    }
    Ok(acc)
}

fn sqrt_minus_k<T: Scalar>(k: &T) -> T {
    (-k.clone()).sqrt()
}

pub(crate) fn curvatures_match<T: Scalar>(a: &T, b: &T) -> Result<()> {
    let (x, y) = (a.value(), b.value());
    if (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1.0) {
        Ok(())
    } else {
        Err(Error::CurvatureMismatch { left: x, right: y })
    }
}

/// A point on the hyperboloid sheet of a fixed curvature.
#[derive(Debug, Clone)]
pub struct LorentzPoint<T> {
    coords: Vec<T>,
    k: T,
}

impl<T: Scalar> LorentzPoint<T> {
    /// The manifold origin `o = [sqrt(-1/K), 0, ..., 0]` in `n` space dims.
    pub fn origin(n: usize, k: T) -> Self {
        assert!(n >= 1, "need at least one space dimension");
        let mut coords = vec![T::constant(0.0); n + 1];
        coords[0] = (-(T::constant(1.0) / k.clone())).sqrt();
        LorentzPoint { coords, k }
    }

    /// Build a point from its space components, recomputing the time component
    /// as `sqrt(||p_s||^2 - 1/K)` so the constraint holds by construction.
    pub fn from_space(space: &[T], k: T) -> Self {
        assert!(!space.is_empty(), "need at least one space dimension");
        let time = (norm_sq(space) - T::constant(1.0) / k.clone()).sqrt();
        let mut coords = Vec::with_capacity(space.len() + 1);
        coords.push(time);
        coords.extend_from_slice(space);
        LorentzPoint { coords, k }
    }

    /// Validate externally supplied ambient coordinates.
    pub fn from_coords(coords: Vec<T>, k: T) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::dim("LorentzPoint::from_coords", 2, coords.len()));
        }
        if k.value() >= 0.0 || !k.value().is_finite() {
            return Err(Error::Geometry(format!(
                "curvature must be strictly negative, got {}",
                k.value()
            )));
        }
        let p = LorentzPoint { coords, k };
        if p.time().value() <= 0.0 {
            return Err(Error::Geometry(format!(
                "time component must be positive, got {}",
                p.time().value()
            )));
        }
        let tol = MANIFOLD_REL_TOL * (1.0 / p.k.value()).abs().max(1.0);
        if p.constraint_residual() >= tol {
            return Err(Error::Geometry(format!(
                "point violates hyperboloid constraint: residual {:.3e}",
                p.constraint_residual()
            )));
        }
        Ok(p)
    }

    /// Lift an `f64` point into another scalar type as constants, tied to the
    /// provided curvature scalar. Time is recomputed from the space part so
    /// the constraint holds exactly at the new curvature value.
    pub fn lift_constant(p: &LorentzPoint<f64>, k: T) -> Self {
        let space: Vec<T> = p.space().iter().map(|&x| T::constant(x)).collect();
        LorentzPoint::from_space(&space, k)
    }

    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    pub fn time(&self) -> &T {
        &self.coords[0]
    }

    pub fn space(&self) -> &[T] {
        &self.coords[1..]
    }

    /// Number of space dimensions `n` (ambient length is `n + 1`).
    pub fn dim(&self) -> usize {
        self.coords.len() - 1
    }

    pub fn curvature(&self) -> &T {
        &self.k
    }

    /// `| <p,p>_L - 1/K |` evaluated on values.
    pub fn constraint_residual(&self) -> f64 {
        let inner = lorentz_inner(&self.coords, &self.coords)
            .expect("self inner product")
            .value();
        (inner - 1.0 / self.k.value()).abs()
    }

    pub fn to_f64(&self) -> LorentzPoint<f64> {
        LorentzPoint {
            coords: self.coords.iter().map(Scalar::value).collect(),
            k: self.k.value(),
        }
    }

    pub(crate) fn same_manifold(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::dim("same_manifold", self.dim(), other.dim()));
        }
        curvatures_match(&self.k, &other.k)
    }
}

/// A vector in the tangent space at a base point: `<base, v>_L = 0`.
#[derive(Debug, Clone)]
pub struct TangentVector<T> {
    base: LorentzPoint<T>,
    coords: Vec<T>,
}

impl<T: Scalar> TangentVector<T> {
    /// Construct a tangent vector, Lorentz-orthogonally projecting the input
    /// onto the tangent space (`v <- v - K <p,v>_L p`) to remove drift from
    /// upstream arithmetic.
    pub fn new(base: LorentzPoint<T>, coords: Vec<T>) -> Result<Self> {
        if coords.len() != base.coords.len() {
            return Err(Error::dim("TangentVector::new", base.coords.len(), coords.len()));
        }
        let inner = lorentz_inner(&base.coords, &coords)?;
        let coeff = base.k.clone() * inner;
        let coords = coords
            .iter()
            .zip(&base.coords)
            .map(|(v, p)| v.clone() - coeff.clone() * p.clone())
            .collect();
        Ok(TangentVector { base, coords })
    }

    pub fn zero(base: LorentzPoint<T>) -> Self {
        let coords = vec![T::constant(0.0); base.coords.len()];
        TangentVector { base, coords }
    }

    /// Tangent vector at the origin with the given space components.
    pub fn at_origin(space: &[T], k: T) -> Self {
        let base = LorentzPoint::origin(space.len(), k);
        let mut coords = Vec::with_capacity(space.len() + 1);
        coords.push(T::constant(0.0));
        coords.extend_from_slice(space);
        TangentVector { base, coords }
    }

    pub fn base(&self) -> &LorentzPoint<T> {
        &self.base
    }

    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    /// Lorentz squared norm `<v,v>_L` (non-negative for tangent vectors,
    /// clamped at zero against rounding).
    pub fn norm_sq(&self) -> T {
        let inner = lorentz_inner(&self.coords, &self.coords).expect("self inner");
        clamp_min(inner, 0.0)
    }

    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn scale(&self, factor: T) -> Self {
        TangentVector {
            base: self.base.clone(),
            coords: self.coords.iter().map(|c| factor.clone() * c.clone()).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.base.same_manifold(&other.base)?;
        Ok(TangentVector {
            base: self.base.clone(),
            coords: self
                .coords
                .iter()
                .zip(&other.coords)
                .map(|(a, b)| a.clone() + b.clone())
                .collect(),
        })
    }

    /// Tangency residual `|<base, v>_L|`, normalized by coordinate magnitude.
    pub fn tangency_residual(&self) -> f64 {
        let inner = lorentz_inner(&self.base.coords, &self.coords)
            .expect("tangency inner")
            .value();
        let scale: f64 = self
            .base
            .coords
            .iter()
            .zip(&self.coords)
            .map(|(p, v)| (p.value() * v.value()).abs())
            .fold(1.0, f64::max);
        inner.abs() / scale
    }
}

/// Non-empty list of points sharing one curvature and dimension.
#[derive(Debug, Clone)]
pub struct PointBatch<T> {
    points: Vec<LorentzPoint<T>>,
}

impl<T: Scalar> PointBatch<T> {
    pub fn new(points: Vec<LorentzPoint<T>>) -> Result<Self> {
        let first = points.first().ok_or(Error::Empty("PointBatch"))?;
        for p in &points[1..] {
            first.same_manifold(p)?;
        }
        Ok(PointBatch { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[LorentzPoint<T>] {
        &self.points
    }

    pub fn curvature(&self) -> &T {
        self.points[0].curvature()
    }

    pub fn dim(&self) -> usize {
        self.points[0].dim()
    }
}

/// Geodesic distance `d(p,q) = acosh(K <p,q>_L) / sqrt(-K)`.
///
/// The `acosh` argument is clamped to 1 from below, which also makes the
/// gradient exactly zero at coincident points (where the distance itself is
/// not differentiable but its square is, with zero derivative).
pub fn geodesic_distance<T: Scalar>(p: &LorentzPoint<T>, q: &LorentzPoint<T>) -> Result<T> {
    p.same_manifold(q)?;
    let arg = p.curvature().clone() * lorentz_inner(p.coords(), q.coords())?;
    if arg.value() <= 1.0 + 1e-15 {
        return Ok(T::constant(0.0));
    }
    Ok(arg.acosh() / sqrt_minus_k(p.curvature()))
}

/// Exponential map `exp_p(v) = cosh(a) p + sinh(a) v / a` with
/// `a = sqrt(-K) ||v||_L`; returns the base point for `||v||_L < 1e-12`.
pub fn exp_map<T: Scalar>(v: &TangentVector<T>) -> Result<LorentzPoint<T>> {
    let base = v.base();
    let nsq = v.norm_sq();
    if !nsq.value().is_finite() {
        return Err(Error::NonFinite("exp_map tangent norm"));
    }
    if nsq.value() < EXP_SMALL_NORM * EXP_SMALL_NORM {
        return Ok(base.clone());
    }
    let vnorm = nsq.sqrt();
    let alpha = sqrt_minus_k(base.curvature()) * vnorm;
    if !alpha.value().is_finite() {
        return Err(Error::NonFinite("exp_map"));
    }
    let ca = alpha.cosh();
    let sa = alpha.sinh() / alpha;
    let space: Vec<T> = base
        .space()
        .iter()
        .zip(&v.coords()[1..])
        .map(|(p, vi)| ca.clone() * p.clone() + sa.clone() * vi.clone())
        .collect();
    Ok(LorentzPoint::from_space(&space, base.curvature().clone()))
}

/// `acosh(1+d)/sqrt((1+d)^2-1)`, stable down to coincidence.
fn log_scaling<T: Scalar>(delta: T) -> T {
    if delta.value() < LOG_SERIES_EPS {
        T::constant(1.0) - delta.clone() / T::constant(3.0)
            + T::constant(2.0 / 15.0) * delta.clone() * delta
    } else {
        let beta = T::constant(1.0) + delta;
        beta.acosh() / (beta.clone() * beta - T::constant(1.0)).sqrt()
    }
}

/// Logarithmic map: inverse of [`exp_map`]. Coincident inputs give the zero
/// tangent vector.
pub fn log_map<T: Scalar>(base: &LorentzPoint<T>, q: &LorentzPoint<T>) -> Result<TangentVector<T>> {
    base.same_manifold(q)?;
    let beta = base.curvature().clone() * lorentz_inner(base.coords(), q.coords())?;
    let delta = beta.clone() - T::constant(1.0);
    if delta.value() <= COINCIDENT_EPS {
        return Ok(TangentVector::zero(base.clone()));
    }
    let coef = log_scaling(delta);
    let coords: Vec<T> = q
        .coords()
        .iter()
        .zip(base.coords())
        .map(|(qi, pi)| coef.clone() * (qi.clone() - beta.clone() * pi.clone()))
        .collect();
    TangentVector::new(base.clone(), coords)
}

/// Exponential map at the origin, lifting an `n`-vector onto the manifold:
/// `exp_o(x) = [cosh(sqrt(-K)||x||)/sqrt(-K), sinh(sqrt(-K)||x||) x / (sqrt(-K)||x||)]`.
pub fn exp_map_origin<T: Scalar>(x: &[T], k: T) -> Result<LorentzPoint<T>> {
    let rsq = norm_sq(x);
    if !rsq.value().is_finite() {
        return Err(Error::NonFinite("exp_map_origin"));
    }
    if rsq.value() < EXP_SMALL_NORM * EXP_SMALL_NORM {
        return Ok(LorentzPoint::origin(x.len(), k));
    }
    let r = rsq.sqrt();
    let smk = sqrt_minus_k(&k);
    let a = smk.clone() * r.clone();
    let scale = a.sinh() / (smk * r);
    let space: Vec<T> = x.iter().map(|xi| scale.clone() * xi.clone()).collect();
    Ok(LorentzPoint::from_space(&space, k))
}

/// Logarithmic map at the origin, returning space components only (the time
/// component of a tangent vector at the origin is identically zero).
pub fn log_map_origin<T: Scalar>(p: &LorentzPoint<T>) -> Vec<T> {
    // K <o,p>_L = sqrt(-K) p_t for the origin base point.
    let beta = sqrt_minus_k(p.curvature()) * p.time().clone();
    let delta = beta - T::constant(1.0);
    if delta.value() <= COINCIDENT_EPS {
        return vec![T::constant(0.0); p.dim()];
    }
    let coef = log_scaling(delta);
    p.space().iter().map(|s| coef.clone() * s.clone()).collect()
}

/// Parallel transport along the geodesic from `p` to `q`:
/// `PT(v) = v - K<q,v>_L / (1 + K<p,q>_L) (p + q)`.
pub fn parallel_transport<T: Scalar>(
    p: &LorentzPoint<T>,
    q: &LorentzPoint<T>,
    v: &TangentVector<T>,
) -> Result<TangentVector<T>> {
    p.same_manifold(q)?;
    p.same_manifold(v.base())?;
    let k = p.curvature().clone();
    let qv = lorentz_inner(q.coords(), v.coords())?;
    let pq = lorentz_inner(p.coords(), q.coords())?;
    let coeff = k.clone() * qv / (T::constant(1.0) + k * pq);
    let coords: Vec<T> = v
        .coords()
        .iter()
        .zip(p.coords().iter().zip(q.coords()))
        .map(|(vi, (pi, qi))| vi.clone() - coeff.clone() * (pi.clone() + qi.clone()))
        .collect();
    TangentVector::new(q.clone(), coords)
}

/// Gyroaddition `p (+) q = exp_p(PT_{o->p}(log_o(q)))`. The origin is the
/// identity element and `(-)p (+) p = o`.
pub fn gyro_add<T: Scalar>(p: &LorentzPoint<T>, q: &LorentzPoint<T>) -> Result<LorentzPoint<T>> {
    p.same_manifold(q)?;
    let u = log_map_origin(q);
    let at_origin = TangentVector::at_origin(&u, p.curvature().clone());
    let origin = LorentzPoint::origin(p.dim(), p.curvature().clone());
    let transported = parallel_transport(&origin, p, &at_origin)?;
    exp_map(&transported)
}

/// Gyroinverse `(-)p = [p_t, -p_s]`.
pub fn gyro_inverse<T: Scalar>(p: &LorentzPoint<T>) -> LorentzPoint<T> {
    let space: Vec<T> = p.space().iter().map(|s| -s.clone()).collect();
    LorentzPoint::from_space(&space, p.curvature().clone())
}

/// Gyroscalar multiplication `t (.) p = exp_o(t log_o(p))`.
pub fn gyro_scale<T: Scalar>(t: &T, p: &LorentzPoint<T>) -> Result<LorentzPoint<T>> {
    let u = log_map_origin(p);
    let scaled: Vec<T> = u.iter().map(|ui| t.clone() * ui.clone()).collect();
    exp_map_origin(&scaled, p.curvature().clone())
}

/// Renormalize a drifted ambient vector: keep the space components and
/// recompute the time component so the constraint holds exactly.
pub fn project_to_hyperboloid<T: Scalar>(raw: &[T], k: T) -> Result<LorentzPoint<T>> {
    if raw.len() < 2 {
        return Err(Error::dim("project_to_hyperboloid", 2, raw.len()));
    }
    for c in &raw[1..] {
        if !c.value().is_finite() {
            return Err(Error::NonFinite("project_to_hyperboloid"));
        }
    }
    Ok(LorentzPoint::from_space(&raw[1..], k))
}
