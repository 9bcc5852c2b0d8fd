//! Minimal reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! Computations are written once against the [`Backend`] trait. Running them
//! on a [`Tape`] records a graph that [`Tape::backward`] differentiates;
//! running them on [`Eager`] just evaluates values. Both share the same
//! forward kernels, so forward values agree bit for bit.
//!
//! Only row-wise bias addition broadcasts; every other binary op requires
//! identical shapes.

mod eager;
mod matrix;
mod tape;

pub use eager::Eager;
pub use matrix::Matrix;
pub use tape::{Node, OpTag, Tape, Var};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradError {
    #[error("{len} values cannot fill a {rows}x{cols} matrix")]
    LengthMismatch { rows: usize, cols: usize, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("column range {start}..{end} out of bounds for {cols} columns")]
    ColumnRange { start: usize, end: usize, cols: usize },
    #[error("log of non-positive value {value}")]
    NonPositiveLog { value: f64 },
    #[error("{op} of an empty matrix")]
    Empty { op: &'static str },
    #[error("expected a 1x1 value, got {shape:?}")]
    NotScalar { shape: (usize, usize) },
}

pub type Result<T, E = GradError> = std::result::Result<T, E>;

/// Elementwise activation applied after a dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Linear,
}

/// Operations available to differentiable computations.
///
/// `Value` is a cheap handle on a [`Tape`] and an owned [`Matrix`] on
/// [`Eager`].
pub trait Backend {
    type Value: Clone;

    /// Non-trainable input.
    fn constant(&mut self, m: Matrix) -> Self::Value;
    /// Trainable input. On an eager backend this is just a constant.
    fn param(&mut self, m: &Matrix) -> Self::Value;
    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Matrix;

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// Adds a `1 x cols` row to every row of `x`.
    fn add_bias(&mut self, x: &Self::Value, bias: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, x: &Self::Value, k: f64) -> Self::Value;
    fn add_scalar(&mut self, x: &Self::Value, k: f64) -> Self::Value;
    fn square(&mut self, x: &Self::Value) -> Self::Value;
    /// Sum of all entries, as a 1×1 value.
    fn sum(&mut self, x: &Self::Value) -> Self::Value;
    fn mean(&mut self, x: &Self::Value) -> Result<Self::Value>;
    /// Per-row sums, as a `rows x 1` value.
    fn sum_cols(&mut self, x: &Self::Value) -> Self::Value;
    fn concat_cols(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    /// Columns `start..end`.
    fn slice_cols(&mut self, x: &Self::Value, start: usize, end: usize) -> Result<Self::Value>;
    /// Row-major reinterpretation with a new shape.
    fn reshape(&mut self, x: &Self::Value, rows: usize, cols: usize) -> Result<Self::Value>;
    fn exp(&mut self, x: &Self::Value) -> Self::Value;
    fn log(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn tanh(&mut self, x: &Self::Value) -> Self::Value;
    fn sin(&mut self, x: &Self::Value) -> Self::Value;
    fn cos(&mut self, x: &Self::Value) -> Self::Value;
    /// ELU with alpha = 1.
    fn elu(&mut self, x: &Self::Value) -> Self::Value;
    fn softmax_rows(&mut self, x: &Self::Value) -> Self::Value;
    /// Hard clamp; gradient passes only strictly inside the bounds.
    fn clamp(&mut self, x: &Self::Value, lo: f64, hi: f64) -> Self::Value;
    /// Identity on `[-knee, knee]`, smooth tanh saturation towards `±limit`.
    fn soft_clip(&mut self, x: &Self::Value, knee: f64, limit: f64) -> Self::Value;
    fn stop_gradient(&mut self, x: &Self::Value) -> Self::Value;
    /// Emits `forward` as the value while routing the incoming gradient
    /// unchanged onto `through`.
    fn straight_through(&mut self, forward: Matrix, through: &Self::Value) -> Result<Self::Value>;

    fn activate(&mut self, x: &Self::Value, act: Activation) -> Self::Value {
        match act {
            Activation::Elu => self.elu(x),
            Activation::Linear => x.clone(),
        }
    }
}
