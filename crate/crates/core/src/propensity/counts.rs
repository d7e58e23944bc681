use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::point_process::{poisson_log_pmf, sample_points, IntensityField, PointPattern};

/// R(Z): the number of points in a pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReducedCount(pub u64);

impl ReducedCount {
    pub fn value(self) -> u64 {
        self.0
    }
}

pub fn reduce(pattern: &PointPattern) -> ReducedCount {
    ReducedCount(pattern.len() as u64)
}

/// Floor applied when every Monte Carlo draw is empty.
pub const LAMBDA2_FLOOR: f64 = 1e-6;

/// Poisson probability of a reduced count; the single pmf kernel shared by
/// propensity scores and counterfactual probabilities.
pub fn count_probability(count: ReducedCount, lambda: f64) -> Result<f64> {
    Ok(poisson_log_pmf(count.0, lambda)?.exp())
}

/// Monte Carlo estimate of E[R(Z)] under intensity h.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualProb {
    pub lambda2: f64,
    pub n_samples: usize,
    pub standard_error: f64,
    pub floored: bool,
}

impl CounterfactualProb {
    /// A known rate, with no sampling error.
    pub fn from_lambda(lambda2: f64) -> Result<Self> {
        if !(lambda2 > 0.0) || !lambda2.is_finite() {
            return Err(Error::Domain(format!("λ₂ must be positive, got {lambda2}")));
        }
        Ok(Self { lambda2, n_samples: 0, standard_error: 0.0, floored: false })
    }

    pub fn estimate<R: Rng + ?Sized>(h: &IntensityField, n_samples: usize, rng: &mut R) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::Config("counterfactual probability needs at least one sample".into()));
        }
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n_samples {
            let k = sample_points(h, rng).len() as f64;
            sum += k;
            sum_sq += k * k;
        }
        let n = n_samples as f64;
        let mean = sum / n;
        let var = if n_samples > 1 { ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
        let floored = mean <= 0.0;
        if floored {
            log::warn!("all {n_samples} intervention draws were empty; flooring λ₂ at {LAMBDA2_FLOOR:e}");
        }
        Ok(Self { lambda2: mean.max(LAMBDA2_FLOOR), n_samples, standard_error: (var / n).sqrt(), floored })
    }

    pub fn probability(&self, count: ReducedCount) -> Result<f64> {
        count_probability(count, self.lambda2)
    }
}

/// p_h(z) = Pois(R(z); λ₂) with λ₂ the Monte Carlo mean count under h.
pub fn counterfactual_prob<R: Rng + ?Sized>(
    h: &IntensityField,
    count: ReducedCount,
    n_samples: usize,
    rng: &mut R,
) -> Result<(f64, CounterfactualProb)> {
    let cp = CounterfactualProb::estimate(h, n_samples, rng)?;
    Ok((cp.probability(count)?, cp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::point_process::{PatternKind, Point, Region};
    use crate::rng::stream;

    #[test]
    fn reduce_counts_points_regardless_of_order() {
        let r = Region::unit_square(10);
        assert_eq!(reduce(&PointPattern::empty(1, PatternKind::Treatment)), ReducedCount(0));
        let pts: Vec<Point> = (0..7).map(|i| Point::new(0.1 * i as f64 + 0.05, 0.5)).collect();
        let mut rev = pts.clone();
        rev.reverse();
        let a = PointPattern::new(1, PatternKind::Treatment, pts, &r).unwrap();
        let b = PointPattern::new(1, PatternKind::Treatment, rev, &r).unwrap();
        assert_eq!(reduce(&a), ReducedCount(7));
        assert_eq!(reduce(&a), reduce(&b));
    }

    #[test]
    fn pmf_values() {
        let p = count_probability(ReducedCount(2), 2.0).unwrap();
        assert!((p - 2.0 * (-2.0f64).exp()).abs() < 1e-15);
        assert!((p - 0.2707).abs() < 1e-4);
        assert!((count_probability(ReducedCount(0), 1.0).unwrap() - 0.3679).abs() < 1e-4);
        let total: f64 = (0..=50).map(|k| count_probability(ReducedCount(k), 3.0).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn constant_field_lambda2() {
        let h = IntensityField::constant(Region::unit_square(20), 3.0).unwrap();
        let (_, cp) = counterfactual_prob(&h, ReducedCount(3), 10_000, &mut stream(4)).unwrap();
        assert!((cp.lambda2 - 3.0).abs() < 4.0 * (3.0f64 / 10_000.0).sqrt());
        assert!(!cp.floored);
    }

    #[test]
    fn zero_field_is_floored() {
        let h = IntensityField::zeros(Region::unit_square(5));
        let (p, cp) = counterfactual_prob(&h, ReducedCount(0), 100, &mut stream(1)).unwrap();
        assert!(cp.floored);
        assert_eq!(cp.lambda2, LAMBDA2_FLOOR);
        assert!((p - 1.0).abs() < 1e-5);
    }

    #[test]
    fn shared_kernel_is_bit_identical() {
        let cp = CounterfactualProb::from_lambda(2.0).unwrap();
        assert_eq!(
            cp.probability(ReducedCount(2)).unwrap().to_bits(),
            count_probability(ReducedCount(2), 2.0).unwrap().to_bits()
        );
    }
}
