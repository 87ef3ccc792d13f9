//! Named parameter containers.
//!
//! Every trainable set (cell weights, readout, and the gradients of either)
//! walks its tensors in a fixed canonical order through [`ParamSet`]. The
//! optimizer, the finite-difference oracle and the archive format are all
//! written against that walk.

use std::fmt;

use crate::numerics::{Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Matrix(usize, usize),
    Vector(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Matrix(r, c) => r * c,
            Shape::Vector(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Matrix(r, c) => vec![r, c],
            Shape::Vector(n) => vec![n],
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Matrix(r, c) => write!(f, "{r}x{c}"),
            Shape::Vector(n) => write!(f, "[{n}]"),
        }
    }
}

/// A dense array that can live inside a [`ParamSet`].
pub trait Tensor {
    fn shape(&self) -> Shape;
    fn values(&self) -> &[f64];
    fn values_mut(&mut self) -> &mut [f64];
}

impl Tensor for Matrix {
    fn shape(&self) -> Shape {
        Shape::Matrix(self.rows(), self.cols())
    }
    fn values(&self) -> &[f64] {
        self.as_slice()
    }
    fn values_mut(&mut self) -> &mut [f64] {
        self.as_mut_slice()
    }
}

impl Tensor for Vector {
    fn shape(&self) -> Shape {
        Shape::Vector(self.dim())
    }
    fn values(&self) -> &[f64] {
        self.as_slice()
    }
    fn values_mut(&mut self) -> &mut [f64] {
        self.as_mut_slice()
    }
}

pub type Visitor<'a> = dyn FnMut(&'static str, Shape, &[f64]) + 'a;
pub type VisitorMut<'a> = dyn FnMut(&'static str, Shape, &mut [f64]) + 'a;

pub trait ParamSet: Clone {
    fn visit(&self, f: &mut Visitor<'_>);
    fn visit_mut(&mut self, f: &mut VisitorMut<'_>);

    fn names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        self.visit(&mut |name, _, _| out.push(name));
        out
    }

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, s, _| n += s.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        self.visit(&mut |_, _, v| out.extend_from_slice(v));
        out
    }

    /// Overwrites every value from `flat`, in visit order.
    fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars(), "flat length");
        let mut at = 0;
        self.visit_mut(&mut |_, _, v| {
            v.copy_from_slice(&flat[at..at + v.len()]);
            at += v.len();
        });
    }

    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, _, v| v.fill(0.0));
        z
    }

    fn scale_mut(&mut self, k: f64) {
        self.visit_mut(&mut |_, _, v| v.iter_mut().for_each(|x| *x *= k));
    }

    /// `self += other`, matched by position. Both sets must share a structure.
    fn accumulate(&mut self, other: &Self) {
        let flat = other.to_flat();
        assert_eq!(flat.len(), self.num_scalars(), "accumulate: structure mismatch");
        let mut at = 0;
        self.visit_mut(&mut |_, _, v| {
            for x in v.iter_mut() {
                *x += flat[at];
                at += 1;
            }
        });
    }

    fn global_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit(&mut |_, _, v| s += v.iter().map(|x| x * x).sum::<f64>());
        s.sqrt()
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }

    /// Applies `f` to the tensor called `name`. Returns false if there is none.
    fn with_tensor_mut(&mut self, name: &str, f: &mut dyn FnMut(&mut [f64])) -> bool {
        let mut found = false;
        self.visit_mut(&mut |n, _, v| {
            if n == name {
                f(v);
                found = true;
            }
        });
        found
    }

    fn tensor(&self, name: &str) -> Option<Vec<f64>> {
        let mut out = None;
        self.visit(&mut |n, _, v| {
            if n == name {
                out = Some(v.to_vec());
            }
        });
        out
    }
}

/// Visits `field` under `name`; keeps the impls below to one line per tensor.
pub(crate) fn emit<T: Tensor>(f: &mut Visitor<'_>, name: &'static str, t: &T) {
    f(name, t.shape(), t.values());
}

pub(crate) fn emit_mut<T: Tensor>(f: &mut VisitorMut<'_>, name: &'static str, t: &mut T) {
    let shape = t.shape();
    f(name, shape, t.values_mut());
}

/// A bare vector is a one-tensor set; handy for scalar optimizer checks.
impl ParamSet for Vector {
    fn visit(&self, f: &mut Visitor<'_>) {
        emit(f, "value", self);
    }

    fn visit_mut(&mut self, f: &mut VisitorMut<'_>) {
        emit_mut(f, "value", self);
    }
}
