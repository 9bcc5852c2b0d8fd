//! Exact gradients and estimator statistics on enumerable mode spaces.
//!
//! A mode space of `N` categorical factors with `M` classes each is small
//! enough here (at most [`MODE_CAP`] modes) to compute `grad E[f(b)]`
//! exactly by summing over every mode. Sampled estimators are compared
//! against that reference.

use std::fmt;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::distributions::{sample_modes, DistError, SampleMethod};
use crate::gradcore::{Backend, GradError, Matrix, Tape, Var};
use crate::policy::decode_mode;
use crate::rng::Rng;
use crate::stats::{l2_norm, RunningMoments};

pub const MODE_CAP: usize = 1296;
pub const MIN_SAMPLES: usize = 1000;
/// Samples per tape when estimating.
const CHUNK: usize = 8192;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstlabError {
    #[error("{n_classes}^{n_factors} modes exceed the enumeration cap of {MODE_CAP}")]
    TooManyModes { n_factors: usize, n_classes: usize },
    #[error("need at least {MIN_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
    #[error("logits are {got:?}, objective expects {expected:?}")]
    Shape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("objective: {0}")]
    Objective(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

pub type Result<T> = std::result::Result<T, EstlabError>;

/// A scalar function of flattened mode vectors, one per row.
pub trait ModeObjective: Send + Sync {
    /// `z` is `rows x (N*M)`; returns a `rows x 1` column.
    fn eval(&self, tape: &mut Tape, z: Var) -> Result<Var>;
}

#[derive(Clone)]
pub enum Objective {
    /// `<w, z>` with `w` a `1 x NM` row.
    Linear(Matrix),
    /// `z^T Q z` with `Q` square.
    Quadratic(Matrix),
    Constant(f64),
    Custom(Arc<dyn ModeObjective>),
}

impl fmt::Debug for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Objective::Linear(w) => f.debug_tuple("Linear").field(w).finish(),
            Objective::Quadratic(q) => f.debug_tuple("Quadratic").field(q).finish(),
            Objective::Constant(c) => f.debug_tuple("Constant").field(c).finish(),
            Objective::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl Objective {
    pub fn tag(&self) -> &'static str {
        match self {
            Objective::Linear(_) => "linear",
            Objective::Quadratic(_) => "quadratic",
            Objective::Constant(_) => "constant",
            Objective::Custom(_) => "custom",
        }
    }

    pub fn random_linear(width: usize, rng: &mut Rng) -> Self {
        Objective::Linear(Matrix::from_fn(1, width, |_, _| rng.sample(StandardNormal)))
    }

    pub fn random_quadratic(width: usize, rng: &mut Rng) -> Self {
        Objective::Quadratic(Matrix::from_fn(width, width, |_, _| rng.sample(StandardNormal)))
    }

    fn eval(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let width = tape.value(&z).cols();
        let check = |shape: (usize, usize), expected: (usize, usize)| {
            if shape == expected {
                Ok(())
            } else {
                Err(EstlabError::Objective(format!(
                    "parameter shape {shape:?}, expected {expected:?}"
                )))
            }
        };
        Ok(match self {
            Objective::Linear(w) => {
                check(w.shape(), (1, width))?;
                let w = tape.constant(w.transpose());
                tape.matmul(&z, &w)?
            }
            Objective::Quadratic(q) => {
                check(q.shape(), (width, width))?;
                let q = tape.constant(q.clone());
                let zq = tape.matmul(&z, &q)?;
                let prod = tape.mul(&zq, &z)?;
                tape.sum_cols(&prod)
            }
            Objective::Constant(c) => {
                let rows = tape.sum_cols(&z);
                let zero = tape.scale(&rows, 0.0);
                tape.add_scalar(&zero, *c)
            }
            Objective::Custom(f) => f.eval(tape, z)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ObjectiveSpec {
    pub n_factors: usize,
    pub n_classes: usize,
    pub objective: Objective,
}

impl ObjectiveSpec {
    pub fn new(n_factors: usize, n_classes: usize, objective: Objective) -> Result<Self> {
        mode_count(n_factors, n_classes)?;
        Ok(Self {
            n_factors,
            n_classes,
            objective,
        })
    }

    pub fn width(&self) -> usize {
        self.n_factors * self.n_classes
    }

    fn check_logits(&self, logits: &Matrix) -> Result<()> {
        let expected = (self.n_factors, self.n_classes);
        if logits.shape() != expected {
            return Err(EstlabError::Shape {
                expected,
                got: logits.shape(),
            });
        }
        Ok(())
    }

    /// Objective values of flattened mode rows.
    pub fn values(&self, z: &Matrix) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let f = self.objective.eval(&mut tape, zv)?;
        Ok(tape.value(&f).as_slice().to_vec())
    }
}

fn mode_count(n_factors: usize, n_classes: usize) -> Result<usize> {
    let too_many = EstlabError::TooManyModes { n_factors, n_classes };
    let count = u32::try_from(n_factors)
        .ok()
        .and_then(|n| n_classes.checked_pow(n))
        .ok_or(too_many.clone())?;
    if count > MODE_CAP || count == 0 {
        return Err(too_many);
    }
    Ok(count)
}

/// Every mode as per-factor class indices, in lexicographic order (factor 0
/// most significant), so position `k` has mode index `k`.
pub fn enumerate_modes(n_factors: usize, n_classes: usize) -> Result<Vec<Vec<usize>>> {
    let count = mode_count(n_factors, n_classes)?;
    Ok((0..count).map(|k| decode_mode(k, n_factors, n_classes)).collect())
}

/// `N x M` one-hot matrix of a mode.
pub fn mode_matrix(classes: &[usize], n_classes: usize) -> Matrix {
    Matrix::one_hot(classes, n_classes)
}

/// All modes as flattened one-hot rows, `M^N x NM`.
pub fn all_modes_flat(n_factors: usize, n_classes: usize) -> Result<Matrix> {
    let modes = enumerate_modes(n_factors, n_classes)?;
    let width = n_factors * n_classes;
    let mut data = vec![0.0; modes.len() * width];
    for (k, classes) in modes.iter().enumerate() {
        for (i, &c) in classes.iter().enumerate() {
            data[k * width + i * n_classes + c] = 1.0;
        }
    }
    Ok(Matrix::new(modes.len(), width, data)?)
}

/// `E[f(b)]` and its exact logit gradient under independent
/// `softmax(logits row i)` factors.
pub fn exact_categorical(logits: &Matrix, spec: &ObjectiveSpec) -> Result<(f64, Matrix)> {
    spec.check_logits(logits)?;
    let modes = all_modes_flat(spec.n_factors, spec.n_classes)?;
    let values = spec.values(&modes)?;
    // Probabilities sum to one, so a baseline shift leaves the gradient unchanged.
    let baseline = values.iter().sum::<f64>() / values.len() as f64;
    let f = Matrix::new(modes.rows(), 1, values.iter().map(|v| v - baseline).collect())?;

    let mut tape = Tape::new();
    let l = tape.param(logits);
    let logp = log_softmax_rows(&mut tape, l)?;
    let flat = tape.reshape(&logp, spec.width(), 1)?;
    let o = tape.constant(modes);
    let log_prob = tape.matmul(&o, &flat)?;
    let prob = tape.exp(&log_prob);
    let fv = tape.constant(f);
    let weighted = tape.mul(&prob, &fv)?;
    let expectation = tape.sum(&weighted);
    tape.backward(expectation)?;
    Ok((tape.value(&expectation).item()? + baseline, tape.grad(l)))
}

pub fn exact_categorical_grad(logits: &Matrix, spec: &ObjectiveSpec) -> Result<Matrix> {
    exact_categorical(logits, spec).map(|(_, g)| g)
}

/// Row-wise log-softmax with the row max subtracted as a constant.
fn log_softmax_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let (rows, cols) = tape.value(&x).shape();
    let maxes: Vec<f64> = (0..rows)
        .map(|r| tape.value(&x).row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shift = tape.constant(Matrix::from_fn(rows, cols, |r, _| maxes[r]));
    let shifted = tape.sub(&x, &shift)?;
    let e = tape.exp(&shifted);
    let total = tape.sum_cols(&e);
    let lse = tape.log(&total)?;
    let ones = tape.constant(Matrix::filled(1, cols, 1.0));
    let spread = tape.matmul(&lse, &ones)?;
    Ok(tape.sub(&shifted, &spread)?)
}

/// Which reference the reported bias is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasKind {
    /// Gradient estimator of the categorical objective itself.
    Estimator,
    /// The estimator targets the relaxed objective; the bias against the
    /// categorical gradient is the relaxation gap.
    Relaxation,
}

impl BiasKind {
    pub fn name(self) -> &'static str {
        match self {
            BiasKind::Estimator => "estimator",
            BiasKind::Relaxation => "relaxation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorReport {
    pub method: SampleMethod,
    pub temperature: f64,
    pub n_samples: usize,
    pub mean_grad: Matrix,
    /// Per-element standard error of `mean_grad`.
    pub std_error: Matrix,
    pub exact_grad: Matrix,
    pub bias_norm: f64,
    /// Sum of per-element sample variances.
    pub variance_trace: f64,
    /// `sqrt(variance_trace / n_samples)`.
    pub std_error_norm: f64,
    pub bias_kind: BiasKind,
}

/// Draws `n_samples` independent single-sample gradient estimates of
/// `grad_logits f(sample(logits))` and summarizes them.
pub fn estimator_stats(
    method: SampleMethod,
    logits: &Matrix,
    spec: &ObjectiveSpec,
    temperature: f64,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<EstimatorReport> {
    spec.check_logits(logits)?;
    if n_samples < MIN_SAMPLES {
        return Err(EstlabError::TooFewSamples(n_samples));
    }
    let exact_grad = exact_categorical_grad(logits, spec)?;
    let (n, m) = logits.shape();
    let mut moments = RunningMoments::new(n * m);
    let mut done = 0;
    while done < n_samples {
        let k = CHUNK.min(n_samples - done);
        // One copy of the logits per sample, so each copy's gradient is one
        // independent estimate.
        let tiled = Matrix::from_fn(k * n, m, |r, c| logits.get(r % n, c));
        let mut tape = Tape::new();
        let l = tape.param(&tiled);
        let sample = sample_modes(&mut tape, &l, method, temperature, rng)?;
        let z = tape.reshape(&sample.z, k, n * m)?;
        let f = spec.objective.eval(&mut tape, z)?;
        let total = tape.sum(&f);
        tape.backward(total)?;
        let g = tape.grad(l);
        for s in 0..k {
            moments.push(&g.as_slice()[s * n * m..(s + 1) * n * m]);
        }
        done += k;
    }
    let mean_grad = Matrix::new(n, m, moments.mean().to_vec())?;
    let std_error = Matrix::new(n, m, moments.std_error())?;
    let variance_trace: f64 = moments.variance().iter().sum();
    let diff: Vec<f64> = mean_grad
        .as_slice()
        .iter()
        .zip(exact_grad.as_slice())
        .map(|(a, b)| a - b)
        .collect();
    Ok(EstimatorReport {
        method,
        temperature,
        n_samples,
        bias_norm: l2_norm(&diff),
        variance_trace,
        std_error_norm: (variance_trace / n_samples as f64).sqrt(),
        bias_kind: match method {
            SampleMethod::GumbelSoft => BiasKind::Relaxation,
            _ => BiasKind::Estimator,
        },
        mean_grad,
        std_error,
        exact_grad,
    })
}
