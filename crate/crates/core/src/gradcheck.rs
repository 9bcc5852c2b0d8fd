//! Central finite-difference checking of reverse-mode gradients.
//!
//! The numeric side only ever runs forward passes on [`Eager`], so it is
//! independent of every backward rule on the [`Tape`].

use crate::gradcore::{Backend, Eager, Matrix, Result, Tape};

/// A scalar-valued function of several matrix inputs, written once for any
/// backend.
pub trait ScalarFn {
    fn eval<B: Backend>(&self, b: &mut B, inputs: &[B::Value]) -> Result<B::Value>;
}

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub rel: f64,
    /// Differences below this are accepted regardless of relative error.
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { rel: 1e-6, abs: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<Matrix>,
    pub numeric: Vec<Matrix>,
    /// Largest relative error over entries whose absolute error exceeds the
    /// absolute tolerance.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

pub fn analytic_grads<F: ScalarFn>(f: &F, inputs: &[Matrix]) -> Result<Vec<Matrix>> {
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|m| tape.param(m)).collect();
    let out = f.eval(&mut tape, &vars)?;
    tape.backward(out)?;
    Ok(vars.iter().map(|&v| tape.grad(v)).collect())
}

pub fn numeric_grads<F: ScalarFn>(f: &F, inputs: &[Matrix], eps: f64) -> Result<Vec<Matrix>> {
    let mut work: Vec<Matrix> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Matrix::zeros(inputs[i].rows(), inputs[i].cols());
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].as_slice()[j];
            work[i].as_mut_slice()[j] = x0 + eps;
            let plus = f.eval(&mut Eager, &work)?.item()?;
            work[i].as_mut_slice()[j] = x0 - eps;
            let minus = f.eval(&mut Eager, &work)?.item()?;
            work[i].as_mut_slice()[j] = x0;
            g.as_mut_slice()[j] = (plus - minus) / (2.0 * eps);
        }
        grads.push(g);
    }
    Ok(grads)
}

pub fn check<F: ScalarFn>(f: &F, inputs: &[Matrix], eps: f64, tol: Tolerance) -> Result<GradCheckReport> {
    let analytic = analytic_grads(f, inputs)?;
    let numeric = numeric_grads(f, inputs, eps)?;
    let mut max_rel_err: f64 = 0.0;
    let mut max_abs_err: f64 = 0.0;
    let mut passed = true;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&x, &y) in a.as_slice().iter().zip(n.as_slice()) {
            let abs = (x - y).abs();
            max_abs_err = max_abs_err.max(abs);
            if abs > tol.abs {
                let rel = abs / x.abs().max(y.abs());
                max_rel_err = max_rel_err.max(rel);
                if rel > tol.rel {
                    passed = false;
                }
            }
        }
    }
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_err,
        max_abs_err,
        passed,
    })
}
