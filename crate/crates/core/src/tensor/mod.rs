//! Dense f64 tensors and a reverse-mode autodiff graph.
//!
//! [`Tensor`] is a plain value: a [`Shape`] and a row-major buffer. Values
//! that participate in differentiation live inside a [`Graph`] and are
//! addressed through [`Var`] handles; [`Graph::backward`] walks the recorded
//! nodes in reverse insertion order and returns a [`Gradients`] map.
//!
//! 4-d feature maps use the NCHW convention throughout.

mod gradcheck;
mod graph;
mod kernels;

pub use gradcheck::{grad_check, GradCheckReport, KINK_EXCLUSION};
pub use graph::{inject_backward_fault, BatchStats, BnMode, Gradients, Graph, Var};
pub use kernels::{conv_output_size, im2col, matmul_into};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use std::fmt;

/// Maximum rank supported by the engine.
pub const MAX_RANK: usize = 4;

/// Ordered list of tensor extents. Rank 0 denotes a scalar.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(Error::dim(
                "shape",
                format!("rank {} exceeds {MAX_RANK}", dims.len()),
            ));
        }
        if let Some(i) = dims.iter().position(|&d| d == 0) {
            return Err(Error::dim("shape", format!("extent {i} is zero")));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
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
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::dim(
                "tensor",
                format!(
                    "shape {shape} needs {} values, got {}",
                    shape.numel(),
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn full(dims: &[usize], value: f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Tensor {
            shape,
            data: vec![value; n],
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Result<Self> {
        Self::full(dims, 1.0)
    }

    /// Samples i.i.d. `N(0, std²)` values.
    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f64, rng: &mut R) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = (0..shape.numel())
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Tensor { shape, data })
    }

    /// Samples i.i.d. uniform values in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(
        dims: &[usize],
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
        Ok(Tensor { shape, data })
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

    /// Mutable access to the buffer. This is the only mutation path and is
    /// meant for optimizer updates and initialization.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::dim(
                "item",
                format!("expected one element, shape is {}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        Tensor::new(dims, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        // x·0 is 0 for finite x and NaN otherwise; lanes keep it vectorizable
        let mut acc = [0.0f64; 8];
        let mut chunks = self.data.chunks_exact(8);
        for c in &mut chunks {
            for (a, &x) in acc.iter_mut().zip(c) {
                *a += x * 0.0;
            }
        }
        chunks.remainder().iter().all(|v| v.is_finite()) && acc.iter().all(|&a| a == 0.0)
    }

    /// Element at NCHW position `(n, c, h, w)` of a rank-4 tensor.
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let d = self.dims();
        self.data[((n * d[1] + c) * d[2] + h) * d[3] + w]
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice_outer(&self, start: usize, len: usize) -> Result<Tensor> {
        let d = self.dims();
        if d.is_empty() || start + len > d[0] || len == 0 {
            return Err(Error::dim(
                "slice_outer",
                format!(
                    "rows {start}..{} out of {}",
                    start + len,
                    d.first().unwrap_or(&0)
                ),
            ));
        }
        let inner: usize = d[1..].iter().product();
        let mut dims = d.to_vec();
        dims[0] = len;
        Tensor::new(
            &dims,
            self.data[start * inner..(start + len) * inner].to_vec(),
        )
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_zero_and_high_rank() {
        assert!(Shape::new(&[2, 0, 3]).is_err());
        assert!(Shape::new(&[1, 1, 1, 1, 1]).is_err());
        assert_eq!(Shape::new(&[2, 3, 4]).unwrap().numel(), 24);
        assert_eq!(Shape::scalar().numel(), 1);
    }

    #[test]
    fn tensor_length_must_match_shape() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        let t = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.reshape(&[4]).unwrap().data(), t.data());
        assert!(Tensor::scalar(3.0).item().unwrap() == 3.0);
        assert!(t.item().is_err());
    }

    #[test]
    fn slice_outer_takes_leading_rows() {
        let t = Tensor::new(&[3, 2], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let s = t.slice_outer(1, 2).unwrap();
        assert_eq!(s.dims(), &[2, 2]);
        assert_eq!(s.data(), &[2., 3., 4., 5.]);
        assert!(t.slice_outer(2, 2).is_err());
    }
}
