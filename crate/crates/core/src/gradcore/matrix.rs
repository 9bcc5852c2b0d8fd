//! Dense row-major `f64` matrices and the forward kernels shared by every
//! backend.
//!
//! Both the recording [`Tape`](super::Tape) and the [`Eager`](super::Eager)
//! evaluator call into these functions, so a computation expressed once
//! against [`Backend`](super::Backend) produces bit-identical values on
//! either path.

use std::fmt;

use super::{GradError, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) {:?}", self.rows, self.cols, self.data)
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(GradError::LengthMismatch {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(GradError::ShapeMismatch {
                    op: "from_rows",
                    left: (1, cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Returns the single entry of a 1×1 matrix.
    pub fn item(&self) -> Result<f64> {
        if self.shape() != (1, 1) {
            return Err(GradError::NotScalar { shape: self.shape() });
        }
        Ok(self.data[0])
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Index of the largest entry of each row; ties resolve to the lowest
    /// index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// One-hot rows with the hot entry at `indices[r]`.
    pub fn one_hot(indices: &[usize], cols: usize) -> Self {
        let mut m = Self::zeros(indices.len(), cols);
        for (r, &i) in indices.iter().enumerate() {
            m.data[r * cols + i] = 1.0;
        }
        m
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(GradError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn zip_with(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    alpha: f64,
    a: &Matrix,
    trans_a: bool,
    b: &Matrix,
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
    c_cols: usize,
) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if trans_b { b.rows } else { b.cols };
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(c_cols, n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: strides describe the row-major buffers above, whose lengths
    // were checked by the callers' shape validation.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            c_cols as isize,
            1,
        );
    }
}

pub(crate) fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(GradError::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm(1.0, a, false, b, false, 0.0, &mut out.data, b.cols);
    Ok(out)
}

pub(crate) fn add_bias(x: &Matrix, bias: &Matrix) -> Result<Matrix> {
    if bias.rows != 1 || bias.cols != x.cols {
        return Err(GradError::ShapeMismatch {
            op: "add_bias",
            left: x.shape(),
            right: bias.shape(),
        });
    }
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(x.cols.max(1)) {
        for (o, b) in row.iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(out)
}

pub(crate) fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    same_shape("add", a, b)?;
    Ok(zip_with(a, b, |x, y| x + y))
}

pub(crate) fn sub(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    same_shape("sub", a, b)?;
    Ok(zip_with(a, b, |x, y| x - y))
}

pub(crate) fn mul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    same_shape("mul", a, b)?;
    Ok(zip_with(a, b, |x, y| x * y))
}

pub(crate) fn scale(x: &Matrix, k: f64) -> Matrix {
    x.map(|v| v * k)
}

pub(crate) fn add_scalar(x: &Matrix, k: f64) -> Matrix {
    x.map(|v| v + k)
}

pub(crate) fn square(x: &Matrix) -> Matrix {
    x.map(|v| v * v)
}

pub(crate) fn sum(x: &Matrix) -> Matrix {
    Matrix::scalar(x.data.iter().sum())
}

pub(crate) fn mean(x: &Matrix) -> Result<Matrix> {
    if x.is_empty() {
        return Err(GradError::Empty { op: "mean" });
    }
    Ok(Matrix::scalar(x.data.iter().sum::<f64>() / x.len() as f64))
}

pub(crate) fn sum_cols(x: &Matrix) -> Matrix {
    Matrix {
        rows: x.rows,
        cols: 1,
        data: (0..x.rows).map(|r| x.row(r).iter().sum()).collect(),
    }
}

pub(crate) fn concat_cols(parts: &[&Matrix]) -> Result<Matrix> {
    let rows = parts.first().map_or(0, |m| m.rows);
    if let Some(bad) = parts.iter().find(|m| m.rows != rows) {
        return Err(GradError::ShapeMismatch {
            op: "concat_cols",
            left: parts[0].shape(),
            right: bad.shape(),
        });
    }
    let cols: usize = parts.iter().map(|m| m.cols).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for m in parts {
            data.extend_from_slice(m.row(r));
        }
    }
    Ok(Matrix { rows, cols, data })
}

pub(crate) fn slice_cols(x: &Matrix, start: usize, end: usize) -> Result<Matrix> {
    if start > end || end > x.cols {
        return Err(GradError::ColumnRange {
            start,
            end,
            cols: x.cols,
        });
    }
    let mut data = Vec::with_capacity(x.rows * (end - start));
    for r in 0..x.rows {
        data.extend_from_slice(&x.row(r)[start..end]);
    }
    Ok(Matrix {
        rows: x.rows,
        cols: end - start,
        data,
    })
}

pub(crate) fn reshape(x: &Matrix, rows: usize, cols: usize) -> Result<Matrix> {
    if rows * cols != x.len() {
        return Err(GradError::ShapeMismatch {
            op: "reshape",
            left: x.shape(),
            right: (rows, cols),
        });
    }
    Ok(Matrix {
        rows,
        cols,
        data: x.data.clone(),
    })
}

pub(crate) fn log(x: &Matrix) -> Result<Matrix> {
    if let Some(&v) = x.data.iter().find(|&&v| v.is_nan() || v <= 0.0) {
        return Err(GradError::NonPositiveLog { value: v });
    }
    Ok(x.map(f64::ln))
}

#[inline]
pub(crate) fn elu_scalar(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp_m1()
    }
}

pub(crate) fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    if x.cols == 0 {
        return out;
    }
    for row in out.data.chunks_exact_mut(x.cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

pub(crate) fn clamp(x: &Matrix, lo: f64, hi: f64) -> Matrix {
    x.map(|v| v.clamp(lo, hi))
}

/// Identity on `[-knee, knee]`, then a tanh approach to `±limit`. The value
/// and first derivative are continuous at the knee.
#[inline]
pub(crate) fn soft_clip_scalar(v: f64, knee: f64, limit: f64) -> f64 {
    let a = v.abs();
    if a <= knee {
        v
    } else {
        let span = limit - knee;
        (knee + span * ((a - knee) / span).tanh()).copysign(v)
    }
}

#[inline]
pub(crate) fn soft_clip_grad(v: f64, knee: f64, limit: f64) -> f64 {
    let a = v.abs();
    if a <= knee {
        1.0
    } else {
        let t = ((a - knee) / (limit - knee)).tanh();
        1.0 - t * t
    }
}
