//! Dense tensor values and the reverse-mode autodiff tape.
//!
//! Everything the model touches — images, feature maps, weights — is a
//! [`Tensor`]: a shape plus one contiguous row-major buffer. Training runs in
//! f32; the verification suites instantiate the same code with f64, which is
//! why the element type is generic.

mod adam;
mod tape;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use tape::{Gradients, Tape, Var};

use num_traits::{Float, FromPrimitive};
use std::fmt;
use std::iter::Sum;

/// Element type of the engine: f32 for training/inference, f64 for the
/// finite-difference oracles.
pub trait Scalar:
    Float + FromPrimitive + Sum<Self> + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 -> scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar -> f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// An n-dimensional array of numbers in one contiguous row-major buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "shape {shape:?} does not match buffer length {}", data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::zero(); numel] }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_f64s(shape: Vec<usize>, data: &[f64]) -> Self {
        Tensor::new(shape, data.iter().map(|&x| S::of(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.data.len(), "reshape {:?} -> {shape:?}", self.shape);
        self.shape = shape;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat offset for an index in a rank-4 tensor (the N×C×H×W layout).
    #[inline]
    pub fn offset4(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> S {
        self.data[self.offset4(n, c, y, x)]
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> S {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// `[C×H×W]` element access.
    pub fn at3(&self, c: usize, y: usize, x: usize) -> S {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| T::of(v.as_f64())).collect() }
    }

    /// Largest absolute element difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// C[m×n] += A[m×k] · B[k×n], row-major. The k-loop is outermost per row so
/// each output element accumulates in a fixed order regardless of vector
/// width or thread count.
pub(crate) fn matmul_accumulate<S: Scalar>(
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [S],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    let run = |rows: &mut [S], i0: usize, i1: usize| {
        for i in i0..i1 {
            let c_row = &mut rows[(i - i0) * n..(i - i0 + 1) * n];
            let a_row = &a[i * k..(i + 1) * k];
            for (l, &aik) in a_row.iter().enumerate() {
                let b_row = &b[l * n..(l + 1) * n];
                for (c, &bv) in c_row.iter_mut().zip(b_row) {
                    *c = *c + aik * bv;
                }
            }
        }
    };
    // Row-parallel when the product is big enough to amortize the fork.
    if m * k * n >= 1 << 18 && rayon::current_num_threads() > 1 {
        use rayon::prelude::*;
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| run(row, i, i + 1));
    } else {
        run(out, 0, m);
    }
}

pub(crate) fn transpose2<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
