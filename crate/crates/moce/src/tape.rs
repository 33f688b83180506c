//! Minimal tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records each scalar operation as a node holding parent indices
//! and local partial derivatives; [`Var::backward`] runs one reverse sweep to
//! accumulate adjoints. Constants are kept off the tape entirely, so lifting
//! model code written against [`Scalar`] costs one node per operation that
//! actually touches a variable.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use crate::num::Scalar;

struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

#[derive(Default)]
struct TapeInner {
    nodes: RefCell<Vec<Node>>,
}

/// Records operations for reverse-mode differentiation.
pub struct Tape {
    inner: Rc<TapeInner>,
}

impl Tape {
    pub fn new() -> Self {
        Self::with_capacity(1024)
    }

    /// Preallocate node storage; training loops reuse a rough per-step estimate.
    pub fn with_capacity(n: usize) -> Self {
        Tape {
            inner: Rc::new(TapeInner {
                nodes: RefCell::new(Vec::with_capacity(n)),
            }),
        }
    }

    /// Create a leaf variable whose adjoint can be queried after `backward`.
    pub fn var(&self, value: f64) -> Var {
        let idx = self.inner.push(0, 0.0, 0, 0.0);
        Var {
            value,
            node: Some((Rc::clone(&self.inner), idx)),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl TapeInner {
    fn push(&self, p0: u32, d0: f64, p1: u32, d1: f64) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(Node {
            parents: [p0, p1],
            partials: [d0, d1],
        });
        idx
    }
}

/// A scalar on a [`Tape`], or a free-floating constant (no tape entry).
#[derive(Clone)]
pub struct Var {
    value: f64,
    node: Option<(Rc<TapeInner>, u32)>,
}

impl Var {
    fn unary(&self, value: f64, partial: f64) -> Var {
        match &self.node {
            None => Var { value, node: None },
            Some((tape, i)) => {
                let idx = tape.push(*i, partial, *i, 0.0);
                Var {
                    value,
                    node: Some((Rc::clone(tape), idx)),
                }
            }
        }
    }

    fn binary(&self, rhs: &Var, value: f64, da: f64, db: f64) -> Var {
        match (&self.node, &rhs.node) {
            (None, None) => Var { value, node: None },
            (Some((t, i)), None) => {
                let idx = t.push(*i, da, *i, 0.0);
                Var {
                    value,
                    node: Some((Rc::clone(t), idx)),
                }
            }
            (None, Some((t, j))) => {
                let idx = t.push(*j, db, *j, 0.0);
                Var {
                    value,
                    node: Some((Rc::clone(t), idx)),
                }
            }
            (Some((ta, i)), Some((tb, j))) => {
                assert!(Rc::ptr_eq(ta, tb), "variables from different tapes");
                let idx = ta.push(*i, da, *j, db);
                Var {
                    value,
                    node: Some((Rc::clone(ta), idx)),
                }
            }
        }
    }

    /// Reverse sweep from this scalar; returns adjoints for every tape node.
    pub fn backward(&self) -> Gradients {
        let Some((tape, out)) = &self.node else {
            return Gradients { adjoints: Vec::new() };
        };
        let nodes = tape.nodes.borrow();
        let mut adjoints = vec![0.0; nodes.len()];
        adjoints[*out as usize] = 1.0;
        for i in (0..=*out as usize).rev() {
            let a = adjoints[i];
            if a == 0.0 {
                continue;
            }
            let node = &nodes[i];
            for k in 0..2 {
                let p = node.parents[k] as usize;
                let d = node.partials[k];
                if p != i && d != 0.0 {
                    adjoints[p] += d * a;
                }
            }
        }
        Gradients { adjoints }
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.value)
    }
}

/// Adjoints produced by [`Var::backward`].
pub struct Gradients {
    adjoints: Vec<f64>,
}

impl Gradients {
    /// Gradient of the swept output with respect to `v` (0 for constants).
    pub fn wrt(&self, v: &Var) -> f64 {
        match &v.node {
            None => 0.0,
            Some((_, i)) => self.adjoints.get(*i as usize).copied().unwrap_or(0.0),
        }
    }
}

impl Add for Var {
    type Output = Var;
    fn add(self, rhs: Var) -> Var {
        self.binary(&rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl Sub for Var {
    type Output = Var;
    fn sub(self, rhs: Var) -> Var {
        self.binary(&rhs, self.value - rhs.value, 1.0, -1.0)
    }
}

impl Mul for Var {
    type Output = Var;
    fn mul(self, rhs: Var) -> Var {
        self.binary(&rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl Div for Var {
    type Output = Var;
    fn div(self, rhs: Var) -> Var {
        let inv = 1.0 / rhs.value;
        self.binary(&rhs, self.value * inv, inv, -self.value * inv * inv)
    }
}

impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        self.unary(-self.value, -1.0)
    }
}

impl Scalar for Var {
    fn constant(x: f64) -> Self {
        Var {
            value: x,
            node: None,
        }
    }

    fn value(&self) -> f64 {
        self.value
    }

    fn sqrt(&self) -> Self {
        let s = self.value.sqrt();
        self.unary(s, 0.5 / s)
    }

    fn exp(&self) -> Self {
        let e = self.value.exp();
        self.unary(e, e)
    }

    fn ln(&self) -> Self {
        self.unary(self.value.ln(), 1.0 / self.value)
    }

    fn sinh(&self) -> Self {
        self.unary(self.value.sinh(), self.value.cosh())
    }

    fn cosh(&self) -> Self {
        self.unary(self.value.cosh(), self.value.sinh())
    }

    fn tanh(&self) -> Self {
        let t = self.value.tanh();
        self.unary(t, 1.0 - t * t)
    }

    fn asinh(&self) -> Self {
        self.unary(self.value.asinh(), 1.0 / (self.value * self.value + 1.0).sqrt())
    }

    fn acosh(&self) -> Self {
        self.unary(self.value.acosh(), 1.0 / (self.value * self.value - 1.0).sqrt())
    }

    fn abs(&self) -> Self {
        self.unary(self.value.abs(), if self.value < 0.0 { -1.0 } else { 1.0 })
    }

    fn powi(&self, n: i32) -> Self {
        self.unary(self.value.powi(n), f64::from(n) * self.value.powi(n - 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::{central_difference_gradient, elu, softplus};

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let y = tape.var(-2.0);
        let z = x.clone() * y.clone() + x.clone() * x.clone();
        assert_eq!(z.value(), -6.0 + 9.0);
        let g = z.backward();
        assert_eq!(g.wrt(&x), -2.0 + 6.0);
        assert_eq!(g.wrt(&y), 3.0);
    }

    #[test]
    fn constants_stay_off_tape() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let before = tape.len();
        let c = Var::constant(5.0) * Var::constant(3.0);
        assert_eq!(c.value(), 15.0);
        assert_eq!(tape.len(), before);
        let y = x * c;
        let g = y.backward();
        // d(15x)/dx = 15, and the constant has zero gradient.
        assert_eq!(g.wrt(&tape.var(0.0)), 0.0);
        assert_eq!(y.value(), 30.0);
    }

    #[test]
    fn transcendentals_match_finite_differences() {
        let f = |x: &[f64]| -> f64 {
            let a = x[0].sinh() * x[1].cosh() + (x[0] * x[1]).tanh();
            let b = (x[0].powi(2) + 1.7).sqrt().ln() + (1.2 + x[1] * x[1]).acosh();
            let c = softplus(x[0] * 0.7) + elu(x[1] - 0.3) + (x[0] + 2.0 * x[1]).asinh();
            a + b + c
        };
        let x = [0.63, -0.41];
        let fd = central_difference_gradient(f, &x, 1e-6);

        let tape = Tape::new();
        let vx = tape.var(x[0]);
        let vy = tape.var(x[1]);
        let a = vx.sinh() * vy.cosh() + (vx.clone() * vy.clone()).tanh();
        let b = (vx.powi(2) + Var::constant(1.7)).sqrt().ln()
            + (Var::constant(1.2) + vy.clone() * vy.clone()).acosh();
        let c = softplus(vx.clone() * Var::constant(0.7))
            + elu(vy.clone() - Var::constant(0.3))
            + (vx.clone() + Var::constant(2.0) * vy.clone()).asinh();
        let out = a + b + c;
        assert!((out.value() - f(&x)).abs() < 1e-12);

        let g = out.backward();
        for (ad, fd) in [g.wrt(&vx), g.wrt(&vy)].iter().zip(&fd) {
            assert!((ad - fd).abs() < 1e-7, "ad={ad} fd={fd}");
        }
    }

    #[test]
    #[should_panic(expected = "different tapes")]
    fn mixing_tapes_panics() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let _ = t1.var(1.0) + t2.var(2.0);
    }
}
