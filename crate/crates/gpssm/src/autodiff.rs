//! Reverse-mode differentiation on a Wengert tape.
//!
//! [`Var`] is an operator-overloaded scalar that records every operation on a
//! [`Tape`]. A single backward sweep then yields the gradient of one output
//! with respect to every leaf. Constants (anything lifted through
//! `Scalar::from_f64`) are not recorded and contribute no gradient, so the
//! tape only grows with operations that actually touch parameters.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::scalar::Scalar;

const NO_PARENT: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    parent: [u32; 2],
    weight: [f64; 2],
}

/// Records the computation graph for one gradient evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Create a tracked leaf variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(NO_PARENT, 0.0, NO_PARENT, 0.0);
        Var {
            val: value,
            idx,
            tape: Some(self),
        }
    }

    /// Create tracked leaves for a whole slice, in order.
    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    fn push(&self, p0: u32, w0: f64, p1: u32, w1: f64) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        assert!(idx < NO_PARENT as usize, "tape overflow");
        nodes.push(Node {
            parent: [p0, p1],
            weight: [w0, w1],
        });
        idx as u32
    }

    /// Adjoints of every node with respect to `output`, in node order.
    /// Leaves created first occupy the first indices, so the gradient of the
    /// inputs is the prefix of the returned vector.
    pub fn gradient(&self, output: Var<'_>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        let out = match output.tape {
            Some(_) => output.idx as usize,
            None => return adj,
        };
        adj[out] = 1.0;
        for i in (0..=out).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let n = nodes[i];
            if n.parent[0] != NO_PARENT {
                adj[n.parent[0] as usize] += n.weight[0] * a;
            }
            if n.parent[1] != NO_PARENT {
                adj[n.parent[1] as usize] += n.weight[1] * a;
            }
        }
        adj
    }
}

/// A scalar recorded on a [`Tape`], or a free constant when `tape` is `None`.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    val: f64,
    idx: u32,
    tape: Option<&'t Tape>,
}

impl<'t> Var<'t> {
    pub fn constant(val: f64) -> Self {
        Var {
            val,
            idx: NO_PARENT,
            tape: None,
        }
    }

    pub fn val(self) -> f64 {
        self.val
    }

    /// Index of this variable's node; panics on constants.
    pub fn index(self) -> usize {
        assert!(self.tape.is_some(), "constant Var has no tape index");
        self.idx as usize
    }

    #[inline]
    fn unary(self, val: f64, dself: f64) -> Self {
        match self.tape {
            None => Var::constant(val),
            Some(t) => Var {
                val,
                idx: t.push(self.idx, dself, NO_PARENT, 0.0),
                tape: Some(t),
            },
        }
    }

    #[inline]
    fn binary(self, rhs: Self, val: f64, dself: f64, drhs: f64) -> Self {
        let tape = self.tape.or(rhs.tape);
        match tape {
            None => Var::constant(val),
            Some(t) => {
                let (p0, w0) = if self.tape.is_some() {
                    (self.idx, dself)
                } else {
                    (NO_PARENT, 0.0)
                };
                let (p1, w1) = if rhs.tape.is_some() {
                    (rhs.idx, drhs)
                } else {
                    (NO_PARENT, 0.0)
                };
                Var {
                    val,
                    idx: t.push(p0, w0, p1, w1),
                    tape: Some(t),
                }
            }
        }
    }
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.val)
    }
}

impl PartialEq for Var<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.val == other.val
    }
}

impl PartialOrd for Var<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.val.partial_cmp(&other.val)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.val;
        self.binary(rhs, self.val * inv, inv, -self.val * inv * inv)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

impl AddAssign for Var<'_> {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl SubAssign for Var<'_> {
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl MulAssign for Var<'_> {
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl DivAssign for Var<'_> {
    fn div_assign(&mut self, rhs: Self) {
        *self = *self / rhs;
    }
}

impl Scalar for Var<'_> {
    fn from_f64(x: f64) -> Self {
        Var::constant(x)
    }

    fn value(self) -> f64 {
        self.val
    }

    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }

    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }

    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }
}
