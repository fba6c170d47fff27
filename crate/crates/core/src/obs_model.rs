//! Pre/post-change observation densities and likelihood ratios.
//!
//! The belief recursion only ever consumes log-likelihood-ratio values and
//! raw samples, so alternative densities plug in through
//! [`ObservationModel`] without touching the recursion. The shipped
//! implementation is the unit-variance Gaussian mean shift, whose divergence
//! θ²/2 matches the reference operating points (0.5, 0.28125, 0.72 for
//! θ = 1, 0.75, 1.2).

use rand::Rng;
use rand_distr::StandardNormal;

/// Contract between a pre/post density pair and the belief engine.
pub trait ObservationModel: Sync {
    /// `ln(f1(z) / f0(z))`.
    fn log_likelihood_ratio(&self, z: f64) -> f64;

    /// Kullback-Leibler divergence `D(f1, f0)`.
    fn kl_divergence(&self) -> f64;

    /// One draw from `f1` (post-change) or `f0` (pre-change).
    fn sample<R: Rng + ?Sized>(&self, post_change: bool, rng: &mut R) -> f64
    where
        Self: Sized;
}

/// `f0 = N(0,1)`, `f1 = N(θ,1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianShiftModel {
    theta: f64,
}

impl GaussianShiftModel {
    /// `theta` must be finite.
    pub fn new(theta: f64) -> Self {
        assert!(theta.is_finite(), "mean shift must be finite, got {theta}");
        Self { theta }
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }
}

impl ObservationModel for GaussianShiftModel {
    /// Exact analytic value `θz − θ²/2`; expectation +θ²/2 under `f1` and
    /// −θ²/2 under `f0`.
    #[inline]
    fn log_likelihood_ratio(&self, z: f64) -> f64 {
        self.theta * z - 0.5 * self.theta * self.theta
    }

    #[inline]
    fn kl_divergence(&self) -> f64 {
        0.5 * self.theta * self.theta
    }

    /// The standard-normal draw happens before the shift is applied, so the
    /// stream consumption is identical pre- and post-change.
    #[inline]
    fn sample<R: Rng + ?Sized>(&self, post_change: bool, rng: &mut R) -> f64 {
        let noise: f64 = rng.sample(StandardNormal);
        if post_change {
            noise + self.theta
        } else {
            noise
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn llr_reference_points() {
        let m = GaussianShiftModel::new(1.0);
        assert_abs_diff_eq!(m.log_likelihood_ratio(0.5), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.log_likelihood_ratio(1.5), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn kl_values_exact() {
        assert_eq!(GaussianShiftModel::new(1.0).kl_divergence(), 0.5);
        assert_eq!(GaussianShiftModel::new(0.75).kl_divergence(), 0.28125);
        assert_eq!(GaussianShiftModel::new(1.2).kl_divergence(), 0.72);
    }

    #[test]
    fn llr_mean_under_post_matches_divergence() {
        let m = GaussianShiftModel::new(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += m.log_likelihood_ratio(m.sample(true, &mut rng));
        }
        let mean = sum / n as f64;
        // Var(θZ) = θ² = 1, 3 standard errors
        let se = 1.0 / (n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn sample_means() {
        let m = GaussianShiftModel::new(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let n = 1_000_000;
        let (mut pre, mut post) = (0.0, 0.0);
        for _ in 0..n {
            pre += m.sample(false, &mut rng);
            post += m.sample(true, &mut rng);
        }
        let se = 1.0 / (n as f64).sqrt();
        assert!((pre / n as f64).abs() < 3.0 * se);
        assert!((post / n as f64 - 1.0).abs() < 3.0 * se);
    }

    #[test]
    fn inverse_likelihood_ratio_has_unit_mean_under_post() {
        // E_{f1}[f0/f1] = 1 (absolute continuity).
        let m = GaussianShiftModel::new(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let v = (-m.log_likelihood_ratio(m.sample(true, &mut rng))).exp();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean} se {se}");
    }
}
