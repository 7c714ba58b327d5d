//! Scalar reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every elementary operation applied to [`Var`]s created on it,
//! together with the local partial derivatives. [`Tape::gradient`] then sweeps the
//! records in reverse order and accumulates adjoints.
//!
//! Numerical code in this crate is written against the [`Real`] trait, which is
//! implemented both by `f64` (plain evaluation, used by the quadrature oracles and
//! finite differences) and by `Var` (recorded evaluation, used for gradients).

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use crate::error::{Error, Result};
use crate::special;

/// Kind of elementary operation stored on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Ln,
    Sqrt,
    Powi,
    Sigmoid,
    Softplus,
    LnGamma,
    Digamma,
    Min,
    Custom,
}

/// Scalar type the numerical code is generic over.
pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
{
    /// A value that does not depend on anything being differentiated.
    fn constant(value: f64) -> Self;
    fn value(&self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn sigmoid(self) -> Self;
    fn softplus(self) -> Self;
    fn ln_gamma(self) -> Self;
    fn digamma(self) -> Self;
    fn min(self, other: Self) -> Self;

    fn zero() -> Self {
        Self::constant(0.0)
    }

    fn square(self) -> Self {
        self * self
    }

    /// `ln(sigmoid(x))`, stable for large `|x|`.
    fn ln_sigmoid(self) -> Self {
        -(-self).softplus()
    }
}

impl Real for f64 {
    fn constant(value: f64) -> Self {
        value
    }
    fn value(&self) -> f64 {
        *self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    fn sigmoid(self) -> Self {
        special::sigmoid(self)
    }
    fn softplus(self) -> Self {
        special::softplus(self)
    }
    fn ln_gamma(self) -> Self {
        special::ln_gamma(self)
    }
    fn digamma(self) -> Self {
        special::digamma(self)
    }
    fn min(self, other: Self) -> Self {
        f64::min(self, other)
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    start: u32,
    end: u32,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    edges: Vec<(u32, f64)>,
    poison: Option<(usize, Op)>,
}

/// Record of elementary operations. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// A scalar that is either recorded on a tape or a plain constant.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    value: f64,
    node: Option<(&'t Tape, u32)>,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some((_, i)) => write!(f, "Var({} @{})", self.value, i),
            None => write!(f, "Const({})", self.value),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all records. Requires that no `Var` on this tape is still alive.
    pub fn reset(&mut self) {
        let inner = self.inner.get_mut();
        inner.nodes.clear();
        inner.edges.clear();
        inner.poison = None;
    }

    /// New independent input.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(Op::Leaf, value, &[])
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    /// Operation recorded at `index`.
    pub fn op(&self, index: usize) -> Option<Op> {
        self.inner.borrow().nodes.get(index).map(|n| n.op)
    }

    /// First node whose value or partials were not finite, if any.
    pub fn first_non_finite(&self) -> Option<(usize, Op)> {
        self.inner.borrow().poison
    }

    fn push(&self, op: Op, value: f64, edges: &[(u32, f64)]) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let index = inner.nodes.len();
        if inner.poison.is_none() && (!value.is_finite() || edges.iter().any(|e| !e.1.is_finite()))
        {
            inner.poison = Some((index, op));
        }
        let start = inner.edges.len() as u32;
        inner.edges.extend_from_slice(edges);
        let end = inner.edges.len() as u32;
        inner.nodes.push(Node { op, start, end });
        Var {
            value,
            node: Some((self, index as u32)),
        }
    }

    fn owns(&self, var: &Var<'_>) -> Option<u32> {
        match var.node {
            Some((tape, i)) if std::ptr::eq(tape, self) => Some(i),
            _ => None,
        }
    }

    /// Records a custom operation with the given value and local partials.
    ///
    /// Constant parents are accepted and contribute nothing to the backward pass.
    pub fn record<'t>(
        &'t self,
        op: Op,
        parents: &[Var<'t>],
        value: f64,
        partials: &[f64],
    ) -> Result<Var<'t>> {
        crate::error::check_dim("record partials", parents.len(), partials.len())?;
        let next = self.len();
        if !value.is_finite() || partials.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite { node: next, op });
        }
        let mut edges = Vec::with_capacity(parents.len());
        for (p, &d) in parents.iter().zip(partials) {
            match p.node {
                None => {}
                Some(_) => edges.push((self.owns(p).ok_or(Error::NotOnTape)?, d)),
            }
        }
        Ok(self.push(op, value, &edges))
    }

    /// Partial derivatives of `output` with respect to each of `inputs`.
    ///
    /// Inputs that `output` does not depend on (including constants) get 0.
    pub fn gradient(&self, output: Var<'_>, inputs: &[Var<'_>]) -> Result<Vec<f64>> {
        let out = self.owns(&output).ok_or(Error::NotOnTape)? as usize;
        let inner = self.inner.borrow();
        if let Some((node, op)) = inner.poison {
            if node <= out {
                return Err(Error::NonFinite { node, op });
            }
        }
        let mut adjoint = vec![0.0; out + 1];
        adjoint[out] = 1.0;
        for i in (0..=out).rev() {
            let a = adjoint[i];
            if a == 0.0 {
                continue;
            }
            let node = inner.nodes[i];
            for &(parent, partial) in &inner.edges[node.start as usize..node.end as usize] {
                adjoint[parent as usize] += a * partial;
            }
        }
        Ok(inputs
            .iter()
            .map(|v| match self.owns(v) {
                Some(i) if (i as usize) <= out => adjoint[i as usize],
                _ => 0.0,
            })
            .collect())
    }
}

impl<'t> Var<'t> {
    /// Value that carries no derivative information.
    pub fn constant(value: f64) -> Self {
        Var { value, node: None }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn is_recorded(&self) -> bool {
        self.node.is_some()
    }

    fn unary(self, op: Op, value: f64, partial: f64) -> Self {
        match self.node {
            None => Var::constant(value),
            Some((tape, i)) => tape.push(op, value, &[(i, partial)]),
        }
    }

    fn binary(self, rhs: Self, op: Op, value: f64, d_lhs: f64, d_rhs: f64) -> Self {
        match (self.node, rhs.node) {
            (None, None) => Var::constant(value),
            (Some((tape, i)), None) => tape.push(op, value, &[(i, d_lhs)]),
            (None, Some((tape, j))) => tape.push(op, value, &[(j, d_rhs)]),
            (Some((tape, i)), Some((other, j))) => {
                assert!(std::ptr::eq(tape, other), "operands recorded on different tapes");
                tape.push(op, value, &[(i, d_lhs), (j, d_rhs)])
            }
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Add, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Sub, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Mul, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Self) -> Self {
        let q = self.value / rhs.value;
        self.binary(rhs, Op::Div, q, 1.0 / rhs.value, -q / rhs.value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.unary(Op::Neg, -self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Self {
        self.unary(Op::Add, self.value + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Self {
        self.unary(Op::Sub, self.value - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Self {
        self.unary(Op::Mul, self.value * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Self {
        self.unary(Op::Div, self.value / rhs, 1.0 / rhs)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        rhs.unary(Op::Sub, self - rhs.value, -1.0)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

impl<'t> Div<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let q = self / rhs.value;
        rhs.unary(Op::Div, q, -q / rhs.value)
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

impl Real for Var<'_> {
    fn constant(value: f64) -> Self {
        Var::constant(value)
    }
    fn value(&self) -> f64 {
        self.value
    }
    fn exp(self) -> Self {
        let e = self.value.exp();
        self.unary(Op::Exp, e, e)
    }
    fn ln(self) -> Self {
        self.unary(Op::Ln, self.value.ln(), 1.0 / self.value)
    }
    fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        self.unary(Op::Sqrt, s, 0.5 / s)
    }
    fn powi(self, n: i32) -> Self {
        let d = f64::from(n) * self.value.powi(n - 1);
        self.unary(Op::Powi, self.value.powi(n), d)
    }
    fn sigmoid(self) -> Self {
        let s = special::sigmoid(self.value);
        self.unary(Op::Sigmoid, s, s * (1.0 - s))
    }
    fn softplus(self) -> Self {
        let d = special::sigmoid(self.value);
        self.unary(Op::Softplus, special::softplus(self.value), d)
    }
    fn ln_gamma(self) -> Self {
        self.unary(
            Op::LnGamma,
            special::ln_gamma(self.value),
            special::digamma(self.value),
        )
    }
    fn digamma(self) -> Self {
        self.unary(
            Op::Digamma,
            special::digamma(self.value),
            special::trigamma(self.value),
        )
    }
    fn min(self, other: Self) -> Self {
        if self.value <= other.value {
            self.binary(other, Op::Min, self.value, 1.0, 0.0)
        } else {
            self.binary(other, Op::Min, other.value, 0.0, 1.0)
        }
    }
}

/// Sum with a single fold; an empty iterator gives 0.
pub fn sum<S: Real>(items: impl IntoIterator<Item = S>) -> S {
    let mut iter = items.into_iter();
    match iter.next() {
        None => S::zero(),
        Some(first) => iter.fold(first, |acc, x| acc + x),
    }
}

pub fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    sum(a.iter().zip(b).map(|(&x, &y)| x * y))
}

/// Promotes plain values to constants of `S`.
pub fn lift<S: Real>(values: &[f64]) -> Vec<S> {
    values.iter().map(|&v| S::constant(v)).collect()
}

pub fn values<S: Real>(xs: &[S]) -> Vec<f64> {
    xs.iter().map(Real::value).collect()
}
