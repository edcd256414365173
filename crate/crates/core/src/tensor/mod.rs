//! Dense row-major real arrays of rank 1 to 4 and the parameter nodes that
//! carry their gradients.
//!
//! There is no tape. Every layer owns a forward/backward pair built from the
//! primitives in [`ops`], and the model composes those pairs in a fixed order.

pub mod ops;

use std::fmt;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::shape(format!(
                "rank must be between 1 and {MAX_RANK}, got {}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::shape(format!("zero extent in {dims:?}")));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Dims left-padded with ones to rank 4.
    pub(crate) fn padded(&self) -> [usize; MAX_RANK] {
        let mut out = [1; MAX_RANK];
        let off = MAX_RANK - self.0.len();
        out[off..].copy_from_slice(&self.0);
        out
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", parts.join("×"))
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::shape(format!(
                "{} values cannot fill shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros_like(other: &Tensor) -> Tensor {
        Tensor {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Tensor> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_shape(other.dims())?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape(other.dims())?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_shape(&self, dims: &[usize]) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::shape(format!(
                "expected {:?}, got {}",
                Shape(dims.to_vec()),
                self.shape
            )));
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.shape.rank() != rank {
            return Err(Error::shape(format!(
                "{what} must be rank {rank}, got {}",
                self.shape
            )));
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{} ", self.shape)?;
        let head: Vec<String> = self
            .data
            .iter()
            .take(SHOWN)
            .map(|v| format!("{v:.4}"))
            .collect();
        if self.data.len() > SHOWN {
            write!(f, "[{}, …]", head.join(", "))
        } else {
            write!(f, "[{}]", head.join(", "))
        }
    }
}

/// A value with a gradient buffer of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffNode {
    pub value: Tensor,
    pub grad: Tensor,
    pub requires_grad: bool,
}

impl DiffNode {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros_like(&value);
        DiffNode {
            value,
            grad,
            requires_grad: true,
        }
    }

    pub fn constant(value: Tensor) -> Self {
        DiffNode {
            requires_grad: false,
            ..DiffNode::new(value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Adds `g` into the gradient buffer. No-op for constants.
    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        if self.requires_grad {
            self.grad.add_assign(g)?;
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

pub fn zero_grad<'a>(params: impl IntoIterator<Item = &'a mut DiffNode>) {
    for p in params {
        p.zero_grad();
    }
}
