//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Everything the network and the losses need is expressed as operations on
//! 2D row-major matrices ([`Tensor`]); scalars are 1x1. A [`Graph`] records
//! each operation as it is evaluated (forward values are eager) and
//! [`Graph::backward`] replays the tape in reverse to accumulate gradients.
//! Precision is generic: training runs at `f32`, gradient checks at `f64`.

mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Axis, Gradients, Graph, Var};

use std::fmt;
use std::iter::Sum;

use num_traits::Float;

/// Element type for tapes and tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + fmt::Debug + fmt::Display + Default + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal; panics only on values outside the type's
    /// range, which never happens for the constants used here.
    fn lit(x: f64) -> Self {
        Self::from(x).expect("literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("finite float converts")
    }

    /// Exponential used inside softmax rows, where it dominates runtime.
    /// The `f32` override trades the last couple of bits for a
    /// branch-free form the compiler can vectorize across a row; `f64`
    /// keeps the library call because gradient checks run at `f64`.
    fn softmax_exp(self) -> Self {
        self.exp()
    }
}

impl Scalar for f32 {
    fn softmax_exp(self) -> Self {
        exp32(self)
    }
}
impl Scalar for f64 {}

/// Branch-free `exp` for `f32`, within ~3 ulp over the clamped domain.
/// Out-of-range inputs saturate: below -87.3 true exp underflows to zero
/// anyway, and the high clamp keeps the 2^n scale finite.
fn exp32(x: f32) -> f32 {
    let x = x.clamp(-87.336, 88.0);
    let n = (x * std::f32::consts::LOG2_E).round();
    // Cody-Waite two-constant reduction: r = x - n*ln2 stays near 1 ulp
    let r = x - n * 0.693_359_4 - n * (-2.121_944_4e-4);
    // degree-6 Taylor on |r| <= ln2/2; remainder < 1.2e-7 relative
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    // 2^n by exponent-field construction; n is an integer in [-126, 127]
    let scale = f32::from_bits((((n as i32) + 127) << 23) as u32);
    p * scale
}

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid operand in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward requires a scalar (1x1) loss, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::Shape { op, detail }
}

/// Dense 2D matrix, row-major. The one container shared by the network,
/// the losses, and the optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, DiffError> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "tensor",
                format!("{}x{} needs {} elements, got {}", rows, cols, rows * cols, data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn scalar(v: T) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}
