use super::matrix::{self, Matrix};
use super::{Backend, Result};

/// Value-only backend: evaluates without recording anything.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Backend for Eager {
    type Value = Matrix;

    fn constant(&mut self, m: Matrix) -> Matrix {
        m
    }

    fn param(&mut self, m: &Matrix) -> Matrix {
        m.clone()
    }

    fn value<'a>(&'a self, v: &'a Matrix) -> &'a Matrix {
        v
    }

    fn matmul(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        matrix::matmul(a, b)
    }

    fn add_bias(&mut self, x: &Matrix, bias: &Matrix) -> Result<Matrix> {
        matrix::add_bias(x, bias)
    }

    fn add(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        matrix::add(a, b)
    }

    fn sub(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        matrix::sub(a, b)
    }

    fn mul(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        matrix::mul(a, b)
    }

    fn scale(&mut self, x: &Matrix, k: f64) -> Matrix {
        matrix::scale(x, k)
    }

    fn add_scalar(&mut self, x: &Matrix, k: f64) -> Matrix {
        matrix::add_scalar(x, k)
    }

    fn square(&mut self, x: &Matrix) -> Matrix {
        matrix::square(x)
    }

    fn sum(&mut self, x: &Matrix) -> Matrix {
        matrix::sum(x)
    }

    fn mean(&mut self, x: &Matrix) -> Result<Matrix> {
        matrix::mean(x)
    }

    fn sum_cols(&mut self, x: &Matrix) -> Matrix {
        matrix::sum_cols(x)
    }

    fn concat_cols(&mut self, parts: &[Matrix]) -> Result<Matrix> {
        let refs: Vec<&Matrix> = parts.iter().collect();
        matrix::concat_cols(&refs)
    }

    fn slice_cols(&mut self, x: &Matrix, start: usize, end: usize) -> Result<Matrix> {
        matrix::slice_cols(x, start, end)
    }

    fn reshape(&mut self, x: &Matrix, rows: usize, cols: usize) -> Result<Matrix> {
        matrix::reshape(x, rows, cols)
    }

    fn exp(&mut self, x: &Matrix) -> Matrix {
        x.map(f64::exp)
    }

    fn log(&mut self, x: &Matrix) -> Result<Matrix> {
        matrix::log(x)
    }

    fn tanh(&mut self, x: &Matrix) -> Matrix {
        x.map(f64::tanh)
    }

    fn sin(&mut self, x: &Matrix) -> Matrix {
        x.map(f64::sin)
    }

    fn cos(&mut self, x: &Matrix) -> Matrix {
        x.map(f64::cos)
    }

    fn elu(&mut self, x: &Matrix) -> Matrix {
        x.map(matrix::elu_scalar)
    }

    fn softmax_rows(&mut self, x: &Matrix) -> Matrix {
        matrix::softmax_rows(x)
    }

    fn clamp(&mut self, x: &Matrix, lo: f64, hi: f64) -> Matrix {
        matrix::clamp(x, lo, hi)
    }

    fn soft_clip(&mut self, x: &Matrix, knee: f64, limit: f64) -> Matrix {
        x.map(|v| matrix::soft_clip_scalar(v, knee, limit))
    }

    fn stop_gradient(&mut self, x: &Matrix) -> Matrix {
        x.clone()
    }

    fn straight_through(&mut self, forward: Matrix, through: &Matrix) -> Result<Matrix> {
        if forward.shape() != through.shape() {
            return Err(super::GradError::ShapeMismatch {
                op: "straight_through",
                left: forward.shape(),
                right: through.shape(),
            });
        }
        Ok(forward)
    }
}
