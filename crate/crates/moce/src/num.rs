//! Scalar abstraction over plain `f64` and tape-recorded autodiff variables.
//!
//! All geometry and model code in this crate is generic over [`Scalar`], so a
//! single implementation serves both fast `f64` evaluation and reverse-mode
//! gradient computation (see [`crate::tape`]). Branch decisions (clamps,
//! small-norm limits, piecewise activations) are made on `value()`, which
//! gives the usual piecewise derivatives.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Scalar:
    Clone
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Lift a plain number into this scalar type. Constants carry no gradient.
    fn constant(x: f64) -> Self;
    /// The numeric value (used for branching, reporting, and convergence tests).
    fn value(&self) -> f64;

    fn sqrt(&self) -> Self;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sinh(&self) -> Self;
    fn cosh(&self) -> Self;
    fn tanh(&self) -> Self;
    fn asinh(&self) -> Self;
    fn acosh(&self) -> Self;
    fn abs(&self) -> Self;
    fn powi(&self, n: i32) -> Self;
}

impl Scalar for f64 {
    #[inline]
    fn constant(x: f64) -> Self {
        x
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    #[inline]
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    #[inline]
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    #[inline]
    fn sinh(&self) -> Self {
        f64::sinh(*self)
    }
    #[inline]
    fn cosh(&self) -> Self {
        f64::cosh(*self)
    }
    #[inline]
    fn tanh(&self) -> Self {
        f64::tanh(*self)
    }
    #[inline]
    fn asinh(&self) -> Self {
        f64::asinh(*self)
    }
    #[inline]
    fn acosh(&self) -> Self {
        f64::acosh(*self)
    }
    #[inline]
    fn abs(&self) -> Self {
        f64::abs(*self)
    }
    #[inline]
    fn powi(&self, n: i32) -> Self {
        f64::powi(*self, n)
    }
}

/// Euclidean dot product.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::constant(0.0);
    for (x, y) in a.iter().zip(b) {
        acc = acc + x.clone() * y.clone();
    }
    acc
}

/// Euclidean squared norm.
pub fn norm_sq<T: Scalar>(a: &[T]) -> T {
    dot(a, a)
}

/// Euclidean norm.
pub fn norm<T: Scalar>(a: &[T]) -> T {
    norm_sq(a).sqrt()
}

pub fn sum<T: Scalar>(xs: &[T]) -> T {
    let mut acc = T::constant(0.0);
    for x in xs {
        acc = acc + x.clone();
    }
    acc
}

/// Value-level clamp from below; detaches the gradient when the floor binds.
pub fn clamp_min<T: Scalar>(x: T, lo: f64) -> T {
    if x.value() < lo {
        T::constant(lo)
    } else {
        x
    }
}

/// Value-level clamp into `[lo, hi]`; flat (zero gradient) outside.
pub fn clamp<T: Scalar>(x: T, lo: f64, hi: f64) -> T {
    let v = x.value();
    if v < lo {
        T::constant(lo)
    } else if v > hi {
        T::constant(hi)
    } else {
        x
    }
}

pub fn relu<T: Scalar>(x: T) -> T {
    if x.value() > 0.0 {
        x
    } else {
        T::constant(0.0)
    }
}

pub fn elu<T: Scalar>(x: T) -> T {
    if x.value() > 0.0 {
        x
    } else {
        x.exp() - T::constant(1.0)
    }
}

/// Numerically stable softplus `ln(1 + e^x)`.
pub fn softplus<T: Scalar>(x: T) -> T {
    let v = x.value();
    if v > 30.0 {
        x
    } else if v < -30.0 {
        x.exp()
    } else {
        (T::constant(1.0) + x.exp()).ln()
    }
}

/// Central-difference gradient with step `h`: the derivative-free oracle used
/// to cross-check reverse-mode gradients.
pub fn central_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work);
        work[i] = orig - h;
        let fm = f(&work);
        work[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_matches_naive_in_moderate_range() {
        for &x in &[-5.0, -0.3, 0.0, 1.7, 12.0] {
            let naive = (1.0f64 + x.exp()).ln();
            assert!((softplus(x) - naive).abs() < 1e-12);
        }
        // Saturated tails stay finite and monotone.
        assert_eq!(softplus(100.0), 100.0);
        assert!(softplus(-100.0) > 0.0);
    }

    #[test]
    fn central_difference_on_quadratic() {
        let f = |x: &[f64]| 0.5 * x.iter().map(|v| v * v).sum::<f64>();
        let x = [1.0, -2.0, 0.25];
        let g = central_difference_gradient(f, &x, 1e-6);
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - xi).abs() < 1e-8);
        }
    }
}
