//! Reverse-mode differentiable tensor engine.
//!
//! Values live in plain [`Tensor`]s. Differentiable computation happens on a
//! [`Tape`], which is rebuilt for every forward pass: leaves are registered
//! with [`Tape::leaf`], every operation appends a node, and
//! [`Tape::backward`] walks the nodes in reverse once.

pub mod gradcheck;
pub mod io;
pub(crate) mod kernels;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

pub use tape::{Padding, Tape, Var};

/// Scalar type the engine computes in: `f32` for training, `f64` for
/// gradient checks.
pub trait Real: Float + Default + Debug + Display + Sum + Send + Sync + 'static {
    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a·b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    /// Strides and dimensions must address memory inside the given slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn lit(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    fn lit(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Dense row-major n-dimensional array. Images are `[batch, channel, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if let Some(axis) = shape.iter().position(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "axis {axis} has zero length in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {numel} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Dimension(format!(
                "expected rank-4 [N,C,H,W] tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Concatenates rank-4 tensors along the batch axis.
    pub fn stack_batch(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Dimension("cannot stack an empty batch".into()))?;
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for item in items {
            let (ni, ci, hi, wi) = item.dims4()?;
            if (ci, hi, wi) != (c, h, w) {
                return Err(Error::Dimension(format!(
                    "batch item shape {:?} differs from {:?}",
                    item.shape, first.shape
                )));
            }
            n += ni;
            data.extend_from_slice(&item.data);
        }
        Tensor::new(&[n, c, h, w], data)
    }

    /// Returns sample `index` of a rank-4 tensor as a `[1, C, H, W]` tensor.
    pub fn sample(&self, index: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if index >= n {
            return Err(Error::Dimension(format!(
                "batch index {index} out of range for batch size {n}"
            )));
        }
        let len = c * h * w;
        Tensor::new(&[1, c, h, w], self.data[index * len..(index + 1) * len].to_vec())
    }
}

pub(crate) fn check_same_shape(what: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "{what}: rank {} vs rank {} ({a:?} vs {b:?})",
            a.len(),
            b.len()
        )));
    }
    if let Some(axis) = a.iter().zip(b).position(|(x, y)| x != y) {
        return Err(Error::Dimension(format!(
            "{what}: axis {axis} differs ({} vs {}) in {a:?} vs {b:?}",
            a[axis], b[axis]
        )));
    }
    Ok(())
}
