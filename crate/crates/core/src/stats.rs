//! Goodness-of-fit testing and running moments.

use statrs::function::gamma::gamma_ur;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("{counts} counts but {probs} probabilities")]
    LengthMismatch { counts: usize, probs: usize },
    #[error("need at least two classes")]
    TooFewClasses,
    #[error("expected count {expected:.3} for class {class} is below 5")]
    LowExpectedCount { class: usize, expected: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson chi-square test of observed class counts against `probs`, with
/// `classes - 1` degrees of freedom.
pub fn chi_square_fit(counts: &[u64], probs: &[f64]) -> Result<ChiSquare, StatsError> {
    if counts.len() != probs.len() {
        return Err(StatsError::LengthMismatch {
            counts: counts.len(),
            probs: probs.len(),
        });
    }
    if counts.len() < 2 {
        return Err(StatsError::TooFewClasses);
    }
    let n: f64 = counts.iter().map(|&c| c as f64).sum();
    let mut statistic = 0.0;
    for (class, (&c, &p)) in counts.iter().zip(probs).enumerate() {
        let expected = n * p;
        if expected.is_nan() || expected < 5.0 {
            return Err(StatsError::LowExpectedCount { class, expected });
        }
        let diff = c as f64 - expected;
        statistic += diff * diff / expected;
    }
    let dof = counts.len() - 1;
    let p_value = if statistic <= 0.0 {
        1.0
    } else {
        gamma_ur(dof as f64 / 2.0, statistic / 2.0)
    };
    Ok(ChiSquare {
        statistic,
        dof,
        p_value,
    })
}

/// Welford accumulator for the elementwise mean and variance of vectors.
#[derive(Debug, Clone)]
pub struct RunningMoments {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningMoments {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.mean.len());
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased sample variance per element.
    pub fn variance(&self) -> Vec<f64> {
        if self.n < 2 {
            return vec![0.0; self.mean.len()];
        }
        let d = (self.n - 1) as f64;
        self.m2.iter().map(|s| s / d).collect()
    }

    /// Standard error of the mean per element.
    pub fn std_error(&self) -> Vec<f64> {
        let n = self.n.max(1) as f64;
        self.variance().iter().map(|v| (v / n).sqrt()).collect()
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proportional_counts_give_zero_statistic() {
        let fit = chi_square_fit(&[25, 25, 50], &[0.25, 0.25, 0.5]).unwrap();
        assert_eq!(fit.statistic, 0.0);
        assert_eq!(fit.p_value, 1.0);
        assert_eq!(fit.dof, 2);
    }

    #[test]
    fn coin_sixty_forty() {
        let fit = chi_square_fit(&[60, 40], &[0.5, 0.5]).unwrap();
        assert!((fit.statistic - 4.0).abs() < 1e-12);
        assert_eq!(fit.dof, 1);
        // P(chi2_1 > 4) = erfc(sqrt(2)) = 0.0455003...
        assert!((fit.p_value - 0.045_500_263_896_358_4).abs() < 1e-9, "{}", fit.p_value);
    }

    #[test]
    fn low_expected_counts_rejected() {
        let err = chi_square_fit(&[3, 7], &[0.4, 0.6]).unwrap_err();
        assert!(matches!(err, StatsError::LowExpectedCount { class: 0, .. }));
        assert!(chi_square_fit(&[3], &[1.0]).is_err());
        assert!(chi_square_fit(&[3, 4], &[1.0]).is_err());
    }

    #[test]
    fn welford_matches_two_pass() {
        let xs = [[1.0, 2.0], [3.0, -1.0], [0.5, 0.5], [4.0, 2.0]];
        let mut m = RunningMoments::new(2);
        xs.iter().for_each(|x| m.push(x));
        let mean0 = (1.0 + 3.0 + 0.5 + 4.0) / 4.0;
        let var0 = xs.iter().map(|x| (x[0] - mean0) * (x[0] - mean0)).sum::<f64>() / 3.0;
        assert!((m.mean()[0] - mean0).abs() < 1e-15);
        assert!((m.variance()[0] - var0).abs() < 1e-14);
    }
}
