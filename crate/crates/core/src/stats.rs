//! Streaming moments, mergeable across workers, and small fitting helpers.

use serde::{Deserialize, Serialize};

use crate::error::{DkError, Result};

/// Single-pass accumulator of count, mean and central moments up to order 4.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MomentAccumulator {
    count: u64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl MomentAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_slice(values: &[f64]) -> Self {
        let mut acc = Self::new();
        for &v in values {
            acc.push(v);
        }
        acc
    }

    pub fn push(&mut self, x: f64) {
        let n1 = self.count as f64;
        self.count += 1;
        let n = self.count as f64;
        let delta = x - self.mean;
        let delta_n = delta / n;
        let delta_n2 = delta_n * delta_n;
        let term1 = delta * delta_n * n1;
        self.mean += delta_n;
        self.m4 += term1 * delta_n2 * (n * n - 3.0 * n + 3.0) + 6.0 * delta_n2 * self.m2
            - 4.0 * delta_n * self.m3;
        self.m3 += term1 * delta_n * (n - 2.0) - 3.0 * delta_n * self.m2;
        self.m2 += term1;
    }

    /// Pairwise combination; equals accumulating the concatenated samples.
    pub fn merge(&self, other: &Self) -> Self {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = other.mean - self.mean;
        let d2 = delta * delta;
        let d3 = d2 * delta;
        let d4 = d2 * d2;
        let mean = self.mean + delta * nb / n;
        let m2 = self.m2 + other.m2 + d2 * na * nb / n;
        let m3 = self.m3 + other.m3 + d3 * na * nb * (na - nb) / (n * n)
            + 3.0 * delta * (na * other.m2 - nb * self.m2) / n;
        let m4 = self.m4 + other.m4
            + d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * other.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * delta * (na * other.m3 - nb * self.m3) / n;
        Self {
            count: self.count + other.count,
            mean,
            m2,
            m3,
            m4,
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.mean
        }
    }

    /// Unbiased sample variance, `M2 / (count - 1)`; NaN below two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            f64::NAN
        } else {
            (self.m2 / (self.count as f64 - 1.0)).max(0.0)
        }
    }

    /// Standard error of the mean.
    pub fn standard_error(&self) -> f64 {
        (self.variance() / self.count as f64).sqrt()
    }

    /// Sample kurtosis `n M4 / M2^2` (3 for Gaussian data).
    pub fn kurtosis(&self) -> f64 {
        if self.count < 2 || self.m2 == 0.0 {
            f64::NAN
        } else {
            self.count as f64 * self.m4 / (self.m2 * self.m2)
        }
    }

    pub fn skewness(&self) -> f64 {
        if self.count < 2 || self.m2 == 0.0 {
            f64::NAN
        } else {
            (self.count as f64).sqrt() * self.m3 / self.m2.powf(1.5)
        }
    }
}

/// Merges accumulators left to right in the given order.
pub fn merge_all<'a>(accs: impl IntoIterator<Item = &'a MomentAccumulator>) -> MomentAccumulator {
    accs.into_iter().fold(MomentAccumulator::new(), |a, b| a.merge(b))
}

/// Least-squares slope of `log2(values)` against `levels`.
pub fn fit_decay_slope(levels: &[f64], values: &[f64]) -> Result<f64> {
    if levels.len() != values.len() {
        return Err(DkError::InvalidArgument(format!(
            "{} levels vs {} values",
            levels.len(),
            values.len()
        )));
    }
    if levels.len() < 3 {
        return Err(DkError::InvalidArgument("slope fit needs at least 3 points".into()));
    }
    if let Some(v) = values.iter().find(|&&v| !(v > 0.0)) {
        return Err(DkError::InvalidArgument(format!("slope fit needs positive values, got {v}")));
    }
    let logs: Vec<f64> = values.iter().map(|v| v.log2()).collect();
    Ok(least_squares_slope(levels, &logs))
}

pub(crate) fn least_squares_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// z statistic of the difference of two independent estimates.
pub fn two_sample_z(mean_a: f64, var_of_mean_a: f64, mean_b: f64, var_of_mean_b: f64) -> f64 {
    (mean_a - mean_b) / (var_of_mean_a + var_of_mean_b).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    #[test]
    fn push_examples() {
        let acc = MomentAccumulator::from_slice(&[1.0, 1.0, 1.0]);
        assert_eq!(acc.variance(), 0.0);
        let acc = MomentAccumulator::from_slice(&[0.0, 2.0]);
        assert_eq!(acc.mean(), 1.0);
        assert_eq!(acc.variance(), 2.0);
        assert!(MomentAccumulator::from_slice(&[3.0]).variance().is_nan());
    }

    #[test]
    fn standard_normal_moments() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut acc = MomentAccumulator::new();
        for _ in 0..1_000_000 {
            acc.push(rng.sample::<f64, _>(StandardNormal));
        }
        assert!(acc.mean().abs() < 4.0 / 1000.0);
        assert!((acc.variance() - 1.0).abs() < 0.01);
        assert!((acc.kurtosis() - 3.0).abs() < 0.05);
        assert!(acc.skewness().abs() < 0.02);
    }

    #[test]
    fn merge_examples() {
        let a = MomentAccumulator::from_slice(&[0.0, 2.0]);
        assert_eq!(a.merge(&MomentAccumulator::new()), a);
        assert_eq!(MomentAccumulator::new().merge(&a), a);
        let merged = a.merge(&MomentAccumulator::from_slice(&[4.0]));
        let direct = MomentAccumulator::from_slice(&[0.0, 2.0, 4.0]);
        assert!((merged.mean() - direct.mean()).abs() < 1e-12);
        assert!((merged.variance() - direct.variance()).abs() < 1e-12);
    }

    #[test]
    fn slope_examples() {
        let lv = [0.0, 1.0, 2.0, 3.0];
        let v: Vec<f64> = lv.iter().map(|&l| 4f64.powf(-l)).collect();
        assert!((fit_decay_slope(&lv, &v).unwrap() + 2.0).abs() < 1e-12);
        assert!(fit_decay_slope(&lv, &[3.0; 4]).unwrap().abs() < 1e-12);
        assert!(fit_decay_slope(&lv, &[1.0, 0.0, 1.0, 1.0]).is_err());
        assert!(fit_decay_slope(&lv[..2], &v[..2]).is_err());
    }

    proptest! {
        #[test]
        fn perturbed_slope_within_bound(u in proptest::collection::vec(-0.1f64..0.1, 4)) {
            let lv = [0.0, 1.0, 2.0, 3.0];
            let v: Vec<f64> = lv.iter().zip(&u).map(|(&l, e)| 4f64.powf(-l) * (1.0 + e)).collect();
            prop_assert!((fit_decay_slope(&lv, &v).unwrap() + 2.0).abs() <= 0.2);
        }

        #[test]
        fn random_partition_merge(seed in 0u64..200, cuts in proptest::collection::vec(0usize..10_000, 0..8)) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..10_000).map(|_| rng.random_range(-5.0..20.0)).collect();
            let whole = MomentAccumulator::from_slice(&data);
            let mut cuts = cuts;
            cuts.push(0);
            cuts.push(data.len());
            cuts.sort_unstable();
            let parts: Vec<_> = cuts.windows(2).map(|w| MomentAccumulator::from_slice(&data[w[0]..w[1]])).collect();
            let fwd = merge_all(parts.iter());
            let rev = merge_all(parts.iter().rev());
            for m in [fwd, rev] {
                prop_assert_eq!(m.count(), whole.count());
                prop_assert!((m.mean() - whole.mean()).abs() <= 1e-9 * whole.mean().abs());
                prop_assert!((m.variance() - whole.variance()).abs() <= 1e-9 * whole.variance());
                prop_assert!((m.kurtosis() - whole.kurtosis()).abs() <= 1e-9 * whole.kurtosis());
                prop_assert!(m.variance() >= 0.0);
            }
        }
    }
}
