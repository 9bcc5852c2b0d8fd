//! Discrete mode sampling (Gumbel-Softmax and straight-through) and the
//! tanh-squashed diagonal Gaussian action head.
//!
//! Categorical parameters are a logits matrix in which every row is an
//! independent categorical variable. A policy with `N` factors over a batch
//! of `B` states therefore hands over a `(B*N) x M` matrix.

use rand::Rng as _;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::gradcore::{Backend, GradError, Matrix};
use crate::rng::Rng;

/// Uniform draws are clamped to `[UNIFORM_FLOOR, 1 - UNIFORM_FLOOR]` before
/// the double logarithm.
pub const UNIFORM_FLOOR: f64 = 1e-12;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// The pre-squash value passes unchanged up to this magnitude and then
/// saturates smoothly at [`PRE_TANH_LIMIT`], keeping `tanh` strictly inside
/// (-1, 1).
pub const PRE_TANH_KNEE: f64 = 10.0;
pub const PRE_TANH_LIMIT: f64 = 15.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistError {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("expected {expected} noise values, got {got}")]
    NoiseShape { expected: usize, got: usize },
    #[error(transparent)]
    Grad(#[from] GradError),
}

pub type Result<T> = std::result::Result<T, DistError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleMethod {
    Ste,
    GumbelSoft,
    GumbelHard,
}

impl SampleMethod {
    pub fn name(self) -> &'static str {
        match self {
            SampleMethod::Ste => "ste",
            SampleMethod::GumbelSoft => "gumbel_soft",
            SampleMethod::GumbelHard => "gumbel_hard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ste" => Some(SampleMethod::Ste),
            "gumbel_soft" => Some(SampleMethod::GumbelSoft),
            "gumbel_hard" => Some(SampleMethod::GumbelHard),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelConfig {
    temperature: f64,
    pub hard: bool,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            hard: true,
        }
    }
}

impl GumbelConfig {
    pub fn new(temperature: f64, hard: bool) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(DistError::NonPositiveTemperature(temperature));
        }
        Ok(Self { temperature, hard })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

/// A sampled behavior mode: one simplex row per categorical variable.
#[derive(Debug, Clone)]
pub struct ModeSample<V> {
    pub z: V,
    pub hard: bool,
    pub method: SampleMethod,
    /// Row-wise argmax of the forward value.
    pub indices: Vec<usize>,
}

#[inline]
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_FLOOR, 1.0 - UNIFORM_FLOOR);
    -(-u.ln()).ln()
}

/// I.i.d. Gumbel(0, 1) draws.
pub fn sample_gumbel(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| gumbel_from_uniform(rng.random::<f64>()))
}

pub fn sample_standard_normal(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Relaxed categorical sample `softmax((logits + g) / temperature)` per row,
/// or its hard one-hot version with the relaxed sample's gradient.
pub fn gumbel_softmax<B: Backend>(
    b: &mut B,
    logits: &B::Value,
    cfg: &GumbelConfig,
    rng: &mut Rng,
) -> Result<ModeSample<B::Value>> {
    let (rows, cols) = b.value(logits).shape();
    let noise = sample_gumbel(rows, cols, rng);
    gumbel_softmax_with_noise(b, logits, cfg, noise)
}

pub fn gumbel_softmax_with_noise<B: Backend>(
    b: &mut B,
    logits: &B::Value,
    cfg: &GumbelConfig,
    noise: Matrix,
) -> Result<ModeSample<B::Value>> {
    if cfg.temperature.is_nan() || cfg.temperature <= 0.0 {
        return Err(DistError::NonPositiveTemperature(cfg.temperature));
    }
    let g = b.constant(noise);
    let perturbed = b.add(logits, &g)?;
    let scaled = b.scale(&perturbed, 1.0 / cfg.temperature);
    let soft = b.softmax_rows(&scaled);
    // argmax of softmax((l+g)/t) is argmax of l+g, which is temperature free.
    let indices = b.value(&perturbed).argmax_rows();
    if cfg.hard {
        let one_hot = Matrix::one_hot(&indices, b.value(&soft).cols());
        let z = b.straight_through(one_hot, &soft)?;
        Ok(ModeSample {
            z,
            hard: true,
            method: SampleMethod::GumbelHard,
            indices,
        })
    } else {
        Ok(ModeSample {
            z: soft,
            hard: false,
            method: SampleMethod::GumbelSoft,
            indices,
        })
    }
}

/// Inverse-CDF draw from one probability row.
pub fn categorical_index(probs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

/// Exact categorical sample per row, emitted one-hot. The backward pass
/// treats `dz/dp` as the identity and then applies the exact softmax
/// Jacobian, so logit gradients are `(diag(p) - p p^T) u`.
pub fn ste_categorical<B: Backend>(b: &mut B, logits: &B::Value, rng: &mut Rng) -> Result<ModeSample<B::Value>> {
    let rows = b.value(logits).rows();
    let uniforms: Vec<f64> = (0..rows).map(|_| rng.random::<f64>()).collect();
    ste_categorical_with_uniforms(b, logits, &uniforms)
}

pub fn ste_categorical_with_uniforms<B: Backend>(
    b: &mut B,
    logits: &B::Value,
    uniforms: &[f64],
) -> Result<ModeSample<B::Value>> {
    let p = b.softmax_rows(logits);
    let probs = b.value(&p);
    if uniforms.len() != probs.rows() {
        return Err(DistError::NoiseShape {
            expected: probs.rows(),
            got: uniforms.len(),
        });
    }
    let indices: Vec<usize> = uniforms
        .iter()
        .enumerate()
        .map(|(r, &u)| categorical_index(probs.row(r), u))
        .collect();
    let one_hot = Matrix::one_hot(&indices, probs.cols());
    let z = b.straight_through(one_hot, &p)?;
    Ok(ModeSample {
        z,
        hard: true,
        method: SampleMethod::Ste,
        indices,
    })
}

/// Dispatches on the sampling method.
pub fn sample_modes<B: Backend>(
    b: &mut B,
    logits: &B::Value,
    method: SampleMethod,
    temperature: f64,
    rng: &mut Rng,
) -> Result<ModeSample<B::Value>> {
    match method {
        SampleMethod::Ste => ste_categorical(b, logits, rng),
        SampleMethod::GumbelSoft => gumbel_softmax(b, logits, &GumbelConfig::new(temperature, false)?, rng),
        SampleMethod::GumbelHard => gumbel_softmax(b, logits, &GumbelConfig::new(temperature, true)?, rng),
    }
}

/// Plain-valued diagonal Gaussian parameters with `log_std` clamped into
/// `[LOG_STD_MIN, LOG_STD_MAX]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SquashedGaussianParams {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl SquashedGaussianParams {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Self {
        assert_eq!(mean.len(), log_std.len(), "mean and log_std lengths differ");
        let log_std = log_std.into_iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        Self { mean, log_std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn to_graph<B: Backend>(&self, b: &mut B) -> SquashedGaussian<B::Value> {
        SquashedGaussian {
            mean: b.param(&Matrix::row_vector(&self.mean)),
            log_std: b.param(&Matrix::row_vector(&self.log_std)),
        }
    }
}

/// Differentiable Gaussian parameters, one row per batch element.
#[derive(Debug, Clone)]
pub struct SquashedGaussian<V> {
    pub mean: V,
    pub log_std: V,
}

#[derive(Debug, Clone)]
pub struct SquashedSample<V> {
    /// Strictly inside (-1, 1).
    pub action: V,
    /// `mean + std * eps` before saturation and squashing.
    pub pre_tanh: V,
}

/// Splits a `rows x 2k` head output into mean and clamped log-std.
pub fn gaussian_head<B: Backend>(b: &mut B, head: &B::Value, k: usize) -> Result<SquashedGaussian<B::Value>> {
    let cols = b.value(head).cols();
    if cols != 2 * k {
        return Err(GradError::ShapeMismatch {
            op: "gaussian_head",
            left: b.value(head).shape(),
            right: (b.value(head).rows(), 2 * k),
        }
        .into());
    }
    let mean = b.slice_cols(head, 0, k)?;
    let raw = b.slice_cols(head, k, 2 * k)?;
    let log_std = b.clamp(&raw, LOG_STD_MIN, LOG_STD_MAX);
    Ok(SquashedGaussian { mean, log_std })
}

pub fn squash<B: Backend>(b: &mut B, pre: &B::Value) -> B::Value {
    let clipped = b.soft_clip(pre, PRE_TANH_KNEE, PRE_TANH_LIMIT);
    b.tanh(&clipped)
}

pub fn squashed_gaussian_sample<B: Backend>(
    b: &mut B,
    dist: &SquashedGaussian<B::Value>,
    rng: &mut Rng,
) -> Result<SquashedSample<B::Value>> {
    let (rows, cols) = b.value(&dist.mean).shape();
    let eps = sample_standard_normal(rows, cols, rng);
    squashed_gaussian_with_noise(b, dist, eps)
}

/// Reparameterized `tanh(mean + exp(log_std) * eps)` with explicit noise.
pub fn squashed_gaussian_with_noise<B: Backend>(
    b: &mut B,
    dist: &SquashedGaussian<B::Value>,
    eps: Matrix,
) -> Result<SquashedSample<B::Value>> {
    let std = b.exp(&dist.log_std);
    let eps = b.constant(eps);
    let noise = b.mul(&std, &eps)?;
    let pre_tanh = b.add(&dist.mean, &noise)?;
    let action = squash(b, &pre_tanh);
    Ok(SquashedSample { action, pre_tanh })
}

/// Entropy of the pre-squash diagonal Gaussian.
pub fn gaussian_entropy(params: &SquashedGaussianParams) -> f64 {
    let half_log_2pi_e = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    params.log_std.iter().map(|l| l + half_log_2pi_e).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, ScalarFn, Tolerance};
    use crate::gradcore::{Eager, Tape};
    use crate::rng::stream;
    use crate::stats::chi_square_fit;

    fn softmax_oracle(logits: &[f64]) -> Vec<f64> {
        let total: f64 = logits.iter().map(|l| l.exp()).sum();
        logits.iter().map(|l| l.exp() / total).collect()
    }

    #[test]
    fn gumbel_median_and_clamp() {
        assert!((gumbel_from_uniform(0.5) - 0.366_512_920_581_664_3).abs() < 1e-15);
        assert!(gumbel_from_uniform(UNIFORM_FLOOR).is_finite());
        assert!(gumbel_from_uniform(0.0).is_finite());
        assert!(gumbel_from_uniform(1.0).is_finite());
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let n = 1_000_000;
        let mut rng = stream(3, "test");
        let draws = sample_gumbel(1000, 1000, &mut rng);
        let mean = draws.as_slice().iter().sum::<f64>() / n as f64;
        let se = (std::f64::consts::PI.powi(2) / 6.0 / n as f64).sqrt();
        let euler_gamma = 0.577_215_664_901_532_9;
        assert!((mean - euler_gamma).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn zero_noise_unit_temperature_is_softmax() {
        let logits = Matrix::from_rows(&[vec![0.3, -1.0, 2.2], vec![0.0, 0.5, -0.5]]).unwrap();
        let cfg = GumbelConfig::new(1.0, false).unwrap();
        let s = gumbel_softmax_with_noise(&mut Eager, &logits, &cfg, Matrix::zeros(2, 3)).unwrap();
        for r in 0..2 {
            let oracle = softmax_oracle(logits.row(r));
            for (a, b) in s.z.row(r).iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        assert!(!s.hard);
    }

    #[test]
    fn huge_temperature_is_uniform() {
        let logits = Matrix::row_vector(&[5.0, -3.0, 0.0, 1.0]);
        let cfg = GumbelConfig::new(1e6, false).unwrap();
        let mut rng = stream(1, "test");
        let s = gumbel_softmax(&mut Eager, &logits, &cfg, &mut rng).unwrap();
        assert!(s.z.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-4));
    }

    #[test]
    fn temperature_must_be_positive() {
        assert_eq!(
            GumbelConfig::new(0.0, true).unwrap_err(),
            DistError::NonPositiveTemperature(0.0)
        );
        assert!(GumbelConfig::new(-1.0, true).is_err());
        assert!(GumbelConfig::new(f64::NAN, true).is_err());
        let d = GumbelConfig::default();
        assert_eq!((d.temperature(), d.hard), (2.0, true));
    }

    #[test]
    fn hard_rows_are_one_hot_and_rows_sum_to_one() {
        let mut rng = stream(2, "test");
        let logits = Matrix::from_fn(6, 4, |r, c| (r as f64 - c as f64) * 0.3);
        for method in [SampleMethod::Ste, SampleMethod::GumbelHard, SampleMethod::GumbelSoft] {
            let s = sample_modes(&mut Eager, &logits, method, 0.7, &mut rng).unwrap();
            for r in 0..6 {
                let row = s.z.row(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
                if s.hard {
                    assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
                    assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 3);
                    assert_eq!(row[s.indices[r]], 1.0);
                }
            }
        }
    }

    #[test]
    fn hard_gumbel_matches_softmax_frequencies() {
        let logits = Matrix::row_vector(&[1.0, 0.2, -0.5, 0.0, 2.0]);
        let probs = softmax_oracle(logits.as_slice());
        for temperature in [0.1, 2.0] {
            let cfg = GumbelConfig::new(temperature, true).unwrap();
            let mut rng = stream(11, "test");
            let mut counts = [0u64; 5];
            let block = Matrix::from_fn(200_000, 5, |_, c| logits.as_slice()[c]);
            let s = gumbel_softmax(&mut Eager, &block, &cfg, &mut rng).unwrap();
            for i in s.indices {
                counts[i] += 1;
            }
            let fit = chi_square_fit(&counts, &probs).unwrap();
            assert!(fit.p_value > 0.001, "t={temperature} {fit:?}");
        }
    }

    #[test]
    fn ste_uniform_and_skewed_frequencies() {
        let n = 100_000;
        let mut rng = stream(5, "test");
        let flat = Matrix::filled(n, 4, 0.7);
        let s = ste_categorical(&mut Eager, &flat, &mut rng).unwrap();
        let mut counts = [0usize; 4];
        s.indices.iter().for_each(|&i| counts[i] += 1);
        let se = (0.25 * 0.75 / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 3.0 * se, "{counts:?}");
        }

        let skew = Matrix::from_fn(n, 3, |_, c| if c == 0 { 2.0 } else { 0.0 });
        let s = ste_categorical(&mut Eager, &skew, &mut rng).unwrap();
        let freq = s.indices.iter().filter(|&&i| i == 0).count() as f64 / n as f64;
        let e2 = 2f64.exp();
        let p0 = e2 / (e2 + 2.0);
        assert!((p0 - 0.787).abs() < 1e-3);
        let se = (p0 * (1.0 - p0) / n as f64).sqrt();
        assert!((freq - p0).abs() < 3.0 * se, "freq {freq}");
    }

    #[test]
    fn ste_backward_is_softmax_jacobian_transport() {
        let mut rng = stream(8, "test");
        for _ in 0..20 {
            let logits = Matrix::from_fn(1, 4, |_, _| rng.random_range(-2.0..2.0));
            let upstream: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut t = Tape::new();
            let l = t.param(&logits);
            let s = ste_categorical(&mut t, &l, &mut rng).unwrap();
            let w = t.constant(Matrix::row_vector(&upstream));
            let prod = t.mul(&s.z, &w).unwrap();
            let root = t.sum(&prod);
            t.backward(root).unwrap();
            let g = t.grad(l);
            let p = softmax_oracle(logits.as_slice());
            for i in 0..4 {
                let expected: f64 = (0..4)
                    .map(|j| {
                        let jac = if i == j { p[i] - p[i] * p[j] } else { -p[i] * p[j] };
                        jac * upstream[j]
                    })
                    .sum();
                assert!((g.as_slice()[i] - expected).abs() <= 1e-12);
            }
            // Repeated backward on the same tape is bit-identical.
            t.zero_grads();
            t.backward(root).unwrap();
            assert_eq!(t.grad(l), g);
        }
    }

    #[test]
    fn squashed_gaussian_examples() {
        let params = SquashedGaussianParams::new(vec![0.4, -1.3], vec![0.0, 9.0]);
        assert_eq!(params.log_std, vec![0.0, LOG_STD_MAX]);
        let g = params.to_graph(&mut Eager);
        let s = squashed_gaussian_with_noise(&mut Eager, &g, Matrix::zeros(1, 2)).unwrap();
        assert_eq!(s.action.as_slice(), &[0.4f64.tanh(), (-1.3f64).tanh()]);

        let tight = SquashedGaussianParams::new(vec![0.0], vec![-5.0]).to_graph(&mut Eager);
        let mut rng = stream(4, "test");
        let mut inside = 0;
        for _ in 0..10_000 {
            let s = squashed_gaussian_sample(&mut Eager, &tight, &mut rng).unwrap();
            if s.action.as_slice()[0].abs() < 0.05 {
                inside += 1;
            }
        }
        assert!(inside as f64 >= 0.999 * 10_000.0);

        let wild = SquashedGaussianParams::new(vec![40.0, -40.0, 3.0], vec![2.0, 2.0, 2.0]);
        let g = wild.to_graph(&mut Eager);
        for _ in 0..1000 {
            let s = squashed_gaussian_sample(&mut Eager, &g, &mut rng).unwrap();
            assert!(s.action.as_slice().iter().all(|a| a.abs() < 1.0));
        }
    }

    struct SquashedLoss(Matrix);

    impl ScalarFn for SquashedLoss {
        fn eval<B: Backend>(&self, b: &mut B, x: &[B::Value]) -> crate::gradcore::Result<B::Value> {
            let dist = SquashedGaussian {
                mean: x[0].clone(),
                log_std: b.clamp(&x[1], LOG_STD_MIN, LOG_STD_MAX),
            };
            let s = squashed_gaussian_with_noise(b, &dist, self.0.clone()).map_err(|e| match e {
                DistError::Grad(g) => g,
                other => panic!("{other}"),
            })?;
            let w = b.constant(Matrix::from_fn(2, 3, |r, c| 1.0 + r as f64 - 0.5 * c as f64));
            let p = b.mul(&s.action, &w)?;
            Ok(b.sum(&p))
        }
    }

    #[test]
    fn squashed_gaussian_gradients_match_finite_differences() {
        let mut rng = stream(6, "test");
        for _ in 0..10 {
            let eps = sample_standard_normal(2, 3, &mut rng);
            let mean = Matrix::from_fn(2, 3, |_, _| rng.random_range(-1.5..1.5));
            let log_std = Matrix::from_fn(2, 3, |_, _| rng.random_range(-2.0..0.5));
            let rep = check(&SquashedLoss(eps), &[mean, log_std], 1e-6, Tolerance::default()).unwrap();
            assert!(rep.passed, "{}", rep.max_rel_err);
        }
    }

    #[test]
    fn entropy_values() {
        let h = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert!((h - 1.4189).abs() < 1e-4);
        let one = SquashedGaussianParams::new(vec![0.0], vec![0.0]);
        assert!((gaussian_entropy(&one) - h).abs() < 1e-15);
        let two = SquashedGaussianParams::new(vec![0.0, 0.0], vec![0.0, 0.0]);
        assert!((gaussian_entropy(&two) - 2.0 * h).abs() < 1e-15);
        let low = SquashedGaussianParams::new(vec![0.0], vec![-5.0]);
        assert!((gaussian_entropy(&low) - (h - 5.0)).abs() < 1e-12);
    }
}
