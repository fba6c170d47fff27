//! Joint-geometric change propagation across a linear sensor array.
//!
//! A disruption hits sensor 1 at a geometric time Γ₁ with parameter ρ and
//! then travels down the line: the extra delay Γ_ℓ − Γ_{ℓ-1} at sensor ℓ is
//! geometric with parameter ρ_{ℓ-1,ℓ}, all increments independent. By
//! convention ρ_{0,1} = ρ and ρ_{L,L+1} = 0 (a hypothetical observer past the
//! end of the array that never sees the change), so ρ_{ℓ-1,ℓ} is defined for
//! ℓ = 1..L+1.
//!
//! Boundary parameter values have exact structural consequences handled here:
//! a unit parameter makes a sensor change simultaneously with its predecessor
//! ([`ChangeModel::reduce_oblivious`]) and a zero parameter cuts information
//! flow past it ([`ChangeModel::reduce_blocking`]).

use rand::Rng;
use thiserror::Error;

/// Errors from model construction and sampling.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChangeModelError {
    #[error("rho has {got} entries, expected {expected}")]
    WrongLength { expected: usize, got: usize },
    #[error("rho[{index}] = {value} out of range ({requirement})")]
    OutOfRange {
        index: usize,
        value: f64,
        requirement: &'static str,
    },
    #[error("geometric parameter rho[{index}] is zero: inter-sensor delay has infinite mean; reduce the blocking sensor first")]
    DegenerateModel { index: usize },
    #[error("weight index m={m} exceeds l={l}")]
    IndexError { m: usize, l: usize },
}

/// Realized change times, one per sensor, non-decreasing along the array.
///
/// `Γ_ℓ = m` means sensor ℓ's observations are post-change from time `m` on
/// (observations are indexed k = 1, 2, ...; `Γ_ℓ = 0` means post-change from
/// the first sample).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangePoints {
    times: Vec<u64>,
}

impl ChangePoints {
    /// Change time of sensor `l` (1-based).
    pub fn gamma(&self, l: usize) -> u64 {
        self.times[l - 1]
    }

    /// Γ₁, the disruption time itself.
    pub fn first(&self) -> u64 {
        self.times[0]
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.times
    }
}

/// Which original sensors feed each sensor of a reduced model.
///
/// Produced by [`ChangeModel::reduce_oblivious`]: effective sensor `j` of the
/// reduced model combines the log-likelihood ratios of original sensors
/// `groups()[j]` (0-based original indices, in array order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensorMergeMap {
    groups: Vec<Vec<usize>>,
}

impl SensorMergeMap {
    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// True when no sensors were merged.
    pub fn is_identity(&self) -> bool {
        self.groups.iter().all(|g| g.len() == 1)
    }
}

/// The joint-geometric change-process model: sensor count `L` and the
/// parameter vector `[ρ_{0,1}, ρ_{1,2}, ..., ρ_{L-1,L}]`.
///
/// Invariants: `rho[0] = ρ ∈ (0,1)` and `rho[l] ∈ [0,1]` for `l ≥ 1`. The
/// trailing `ρ_{L,L+1} = 0` is a fixed convention, not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeModel {
    sensors: usize,
    rho: Vec<f64>,
}

impl ChangeModel {
    /// Validates and builds a model. Never clamps: out-of-range parameters
    /// are errors.
    pub fn new(sensors: usize, rho: Vec<f64>) -> Result<Self, ChangeModelError> {
        if sensors < 1 || rho.len() != sensors {
            return Err(ChangeModelError::WrongLength {
                expected: sensors.max(1),
                got: rho.len(),
            });
        }
        let first = rho[0];
        if !(first > 0.0 && first < 1.0) {
            return Err(ChangeModelError::OutOfRange {
                index: 0,
                value: first,
                requirement: "rho[0] must lie strictly inside (0,1)",
            });
        }
        for (i, &r) in rho.iter().enumerate().skip(1) {
            if !(0.0..=1.0).contains(&r) || r.is_nan() {
                return Err(ChangeModelError::OutOfRange {
                    index: i,
                    value: r,
                    requirement: "interior parameters must lie in [0,1]",
                });
            }
        }
        Ok(Self { sensors, rho })
    }

    /// Number of sensors `L`.
    pub fn sensors(&self) -> usize {
        self.sensors
    }

    /// The parameter vector `[ρ_{0,1}, ..., ρ_{L-1,L}]`.
    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    /// The disruption parameter ρ = ρ_{0,1}.
    pub fn rho_first(&self) -> f64 {
        self.rho[0]
    }

    /// ρ_{l-1,l} for `l` in `1..=L+1`; `l = L+1` returns the conventional 0.
    pub fn geometric_param(&self, l: usize) -> f64 {
        debug_assert!((1..=self.sensors + 1).contains(&l));
        if l == self.sensors + 1 {
            0.0
        } else {
            self.rho[l - 1]
        }
    }

    /// Prior weight `w_m^l = Π_{j=m-1}^{l-2} ρ_{j,j+1}` for `1 ≤ m ≤ l ≤ L+1`;
    /// the empty product at `m = l` is 1.
    pub fn weight(&self, m: usize, l: usize) -> Result<f64, ChangeModelError> {
        self.log_weight(m, l).map(f64::exp)
    }

    /// `ln w_m^l`, with exact `-inf` when a factor is zero.
    pub fn log_weight(&self, m: usize, l: usize) -> Result<f64, ChangeModelError> {
        if m < 1 || m > l || l > self.sensors + 1 {
            return Err(ChangeModelError::IndexError { m, l });
        }
        let mut acc = 0.0;
        for idx in (m - 1)..(l - 1) {
            acc += self.rho[idx].ln();
        }
        Ok(acc)
    }

    /// Draws one realization of the change points.
    ///
    /// Consumes exactly `L` uniform draws from `rng` regardless of parameter
    /// values, so downstream observation streams stay aligned across models.
    pub fn sample_change_points<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
    ) -> Result<ChangePoints, ChangeModelError> {
        if let Some(idx) = self.rho.iter().position(|&r| r == 0.0) {
            return Err(ChangeModelError::DegenerateModel { index: idx });
        }
        let mut times = Vec::with_capacity(self.sensors);
        let mut current = 0u64;
        for &r in &self.rho {
            current += sample_geometric(r, rng);
            times.push(current);
        }
        Ok(ChangePoints { times })
    }

    /// Exact marginal pmf `P(Γ_l = m)` by convolving the geometric increments.
    ///
    /// This is valid for coincident parameters too, where the textbook closed
    /// forms have removable singularities.
    pub fn marginal_pmf(&self, sensor: usize, m: usize) -> f64 {
        self.marginal_pmf_upto(sensor, m)[m]
    }

    /// `P(Γ_sensor = m)` for all `m ≤ m_max` in one pass.
    pub fn marginal_pmf_upto(&self, sensor: usize, m_max: usize) -> Vec<f64> {
        assert!(
            (1..=self.sensors).contains(&sensor),
            "sensor index {sensor} out of range 1..={}",
            self.sensors
        );
        let rho1 = self.rho[0];
        let mut pmf: Vec<f64> = (0..=m_max)
            .map(|m| rho1 * (1.0 - rho1).powi(m as i32))
            .collect();
        for stage in 2..=sensor {
            let r = self.rho[stage - 1];
            if r == 1.0 {
                continue; // zero-delay increment: distribution unchanged
            }
            // P_l[m] = (1-r) P_l[m-1] + r P_{l-1}[m]
            let mut prev_out = 0.0;
            for v in pmf.iter_mut() {
                let out = (1.0 - r) * prev_out + r * *v;
                *v = out;
                prev_out = out;
            }
        }
        pmf
    }

    /// Removes sensors with unit propagation parameters.
    ///
    /// A parameter ρ_{l',l'+1} = 1 means sensor l'+1 changes together with
    /// sensor l'; the pair acts as one effective sensor observing both
    /// streams, and the belief component for "only the first of the pair has
    /// changed" is identically zero. Returns the reduced model and the map
    /// from effective sensors to the original sensors they combine; the map
    /// is the identity when no parameter equals 1.
    pub fn reduce_oblivious(&self) -> (ChangeModel, SensorMergeMap) {
        let mut groups: Vec<Vec<usize>> = (0..self.sensors).map(|i| vec![i]).collect();
        let mut rho = self.rho.clone();
        let mut i = 1;
        while i < rho.len() {
            if rho[i] == 1.0 {
                let merged = groups.remove(i);
                groups[i - 1].extend(merged);
                rho.remove(i);
            } else {
                i += 1;
            }
        }
        let reduced = ChangeModel::new(groups.len(), rho)
            .expect("removing unit parameters preserves validity");
        (reduced, SensorMergeMap { groups })
    }

    /// Truncates the array at the first blocking sensor.
    ///
    /// If ρ_{l',l'+1} = 0 for some smallest l', no change information flows
    /// past sensor l' and the system is equivalent to the l'-sensor prefix.
    pub fn reduce_blocking(&self) -> ChangeModel {
        match self.rho.iter().skip(1).position(|&r| r == 0.0) {
            Some(pos) => {
                let keep = pos + 1;
                ChangeModel::new(keep, self.rho[..keep].to_vec())
                    .expect("prefix of a valid model is valid")
            }
            None => self.clone(),
        }
    }
}

/// Geometric draw on {0, 1, 2, ...} with success probability `rho`, inverse
/// CDF method. Always consumes exactly one uniform.
fn sample_geometric<R: Rng + ?Sized>(rho: f64, rng: &mut R) -> u64 {
    let u: f64 = rng.gen(); // in [0, 1)
    if rho >= 1.0 {
        return 0;
    }
    // 1 - u in (0, 1]; floor(ln(1-u) / ln(1-rho))
    let x = (1.0 - u).ln() / (1.0 - rho).ln();
    x.floor() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(rho: &[f64]) -> ChangeModel {
        ChangeModel::new(rho.len(), rho.to_vec()).unwrap()
    }

    #[test]
    fn validate_accepts_reference_configs() {
        assert!(ChangeModel::new(2, vec![0.001, 0.1]).is_ok());
        assert!(ChangeModel::new(1, vec![0.5]).is_ok());
        assert!(ChangeModel::new(5, vec![0.005, 0.1, 0.2, 0.5, 0.7]).is_ok());
    }

    #[test]
    fn validate_rejects_bad_input() {
        assert!(matches!(
            ChangeModel::new(2, vec![0.0, 0.1]),
            Err(ChangeModelError::OutOfRange { index: 0, .. })
        ));
        assert!(matches!(
            ChangeModel::new(2, vec![1.0, 0.1]),
            Err(ChangeModelError::OutOfRange { index: 0, .. })
        ));
        assert!(matches!(
            ChangeModel::new(3, vec![0.5, 0.1]),
            Err(ChangeModelError::WrongLength { expected: 3, got: 2 })
        ));
        assert!(matches!(
            ChangeModel::new(2, vec![0.5, 1.5]),
            Err(ChangeModelError::OutOfRange { index: 1, .. })
        ));
    }

    #[test]
    fn weight_reference_values() {
        let m = model(&[0.3, 0.5, 0.9]);
        for l in 1..=4 {
            assert_eq!(m.weight(l, l).unwrap(), 1.0);
        }
        assert_abs_diff_eq!(m.weight(1, 2).unwrap(), 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(m.weight(1, 3).unwrap(), 0.15, epsilon = 1e-15);
        assert!(matches!(
            m.weight(3, 2),
            Err(ChangeModelError::IndexError { m: 3, l: 2 })
        ));
    }

    #[test]
    fn weight_recursion_and_chain_rule() {
        let m = model(&[0.3, 0.5, 0.9, 0.2]);
        let lp1 = m.sensors() + 1;
        for l in 1..=lp1 {
            for mm in 1..l {
                let lhs = m.weight(mm, l).unwrap();
                let rhs = m.geometric_param(mm) * m.weight(mm + 1, l).unwrap();
                assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-15);
                for j in mm..=l {
                    let prod = m.weight(mm, j).unwrap() * m.weight(j, l).unwrap();
                    assert_abs_diff_eq!(prod, lhs, epsilon = 1e-15);
                }
            }
        }
    }

    #[test]
    fn geometric_marginal_is_exact_for_first_sensor() {
        let m = model(&[0.5, 0.25]);
        assert_abs_diff_eq!(m.marginal_pmf(1, 1), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(m.marginal_pmf(2, 0), 0.125, epsilon = 1e-15);
    }

    #[test]
    fn marginal_matches_corrected_closed_forms() {
        // Distinct parameters; closed forms resolved against the convolution:
        // P(Γ₂=m) ∝ (1-ρ₁₂)^{m+1} - (1-ρ)^{m+1} (one power higher than the
        // zero-at-m=0 variant), P(Γ₃=m) uses powers m+2.
        let (r1, r2, r3) = (0.3f64, 0.45f64, 0.6f64);
        let m3 = model(&[r1, r2, r3]);
        for m in 0..40usize {
            let closed2 = r1 * r2 / (r1 - r2)
                * ((1.0 - r2).powi(m as i32 + 1) - (1.0 - r1).powi(m as i32 + 1));
            assert_abs_diff_eq!(m3.marginal_pmf(2, m), closed2, epsilon = 1e-13);
            let p = m as i32 + 2;
            let closed3 = r1 * r2 * r3 / ((r1 - r2) * (r2 - r3) * (r1 - r3))
                * ((r1 - r2) * (1.0 - r3).powi(p) - (r1 - r3) * (1.0 - r2).powi(p)
                    + (r2 - r3) * (1.0 - r1).powi(p));
            assert_abs_diff_eq!(m3.marginal_pmf(3, m), closed3, epsilon = 1e-13);
        }
    }

    #[test]
    fn marginal_normalizes_with_analytic_tail() {
        let (r1, r2) = (0.5f64, 0.25f64);
        let m2 = model(&[r1, r2]);
        let cap = 200;
        let total: f64 = m2.marginal_pmf_upto(2, cap).iter().sum();
        // Tail of the corrected closed form past `cap`.
        let tail = r1 * r2 / (r1 - r2)
            * ((1.0 - r2).powi(cap as i32 + 2) / r2 - (1.0 - r1).powi(cap as i32 + 2) / r1);
        assert_abs_diff_eq!(total + tail, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn marginal_handles_coincident_parameters() {
        // Equal parameters: Γ₂ is negative binomial (2 successes).
        let r = 0.4f64;
        let m2 = model(&[r, r]);
        for m in 0..30usize {
            let nb = (m as f64 + 1.0) * r * r * (1.0 - r).powi(m as i32);
            assert_abs_diff_eq!(m2.marginal_pmf(2, m), nb, epsilon = 1e-14);
        }
    }

    #[test]
    fn sampling_zero_delay_propagation() {
        let m = model(&[0.2, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let cp = m.sample_change_points(&mut rng).unwrap();
            assert_eq!(cp.gamma(1), cp.gamma(2));
        }
    }

    #[test]
    fn sampling_rejects_blocking_parameter() {
        let m = model(&[0.2, 0.0, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(matches!(
            m.sample_change_points(&mut rng),
            Err(ChangeModelError::DegenerateModel { index: 1 })
        ));
    }

    #[test]
    fn sampled_mean_matches_geometric_moment() {
        let m = model(&[0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000u64;
        let sum: u64 = (0..n)
            .map(|_| m.sample_change_points(&mut rng).unwrap().first())
            .sum();
        let mean = sum as f64 / n as f64;
        // E = (1-ρ)/ρ = 1, sd = sqrt(2), 3 standard errors
        let se = 2.0f64.sqrt() / (n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean} off: se {se}");
    }

    #[test]
    fn empirical_pmf_matches_convolution() {
        let m = model(&[0.5, 0.25]);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 1_000_000usize;
        let cap = 50usize;
        let mut counts = vec![0u64; cap + 1];
        for _ in 0..n {
            let g2 = m.sample_change_points(&mut rng).unwrap().gamma(2) as usize;
            if g2 <= cap {
                counts[g2] += 1;
            }
        }
        let pmf = m.marginal_pmf_upto(2, cap);
        for (mm, (&cnt, &p)) in counts.iter().zip(pmf.iter()).enumerate() {
            let phat = cnt as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (phat - p).abs() <= 4.0 * se.max(1e-9),
                "m={mm}: phat={phat} p={p} se={se}"
            );
        }
    }

    #[test]
    fn oblivious_reduction_merges_adjacent_pair() {
        let m = model(&[0.2, 1.0, 0.4]);
        let (reduced, map) = m.reduce_oblivious();
        assert_eq!(reduced.sensors(), 2);
        assert_eq!(reduced.rho(), &[0.2, 0.4]);
        assert_eq!(map.groups(), &[vec![0, 1], vec![2]]);

        let untouched = model(&[0.2, 0.4]);
        let (same, id) = untouched.reduce_oblivious();
        assert_eq!(same, untouched);
        assert!(id.is_identity());

        // All coincident: collapses to a single-sensor system.
        let coincident = model(&[0.2, 1.0]);
        let (single, map) = coincident.reduce_oblivious();
        assert_eq!(single.sensors(), 1);
        assert_eq!(single.rho(), &[0.2]);
        assert_eq!(map.groups(), &[vec![0, 1]]);
    }

    #[test]
    fn blocking_reduction_truncates() {
        let m = model(&[0.2, 0.0, 0.4]);
        let reduced = m.reduce_blocking();
        assert_eq!(reduced.sensors(), 1);
        assert_eq!(reduced.rho(), &[0.2]);

        let m2 = model(&[0.2, 0.3, 0.0]);
        assert_eq!(m2.reduce_blocking().sensors(), 2);

        let clean = model(&[0.2, 0.3]);
        assert_eq!(clean.reduce_blocking(), clean);
    }

    #[test]
    fn sampled_change_points_non_decreasing() {
        let m = model(&[0.3, 0.6, 0.1, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let cp = m.sample_change_points(&mut rng).unwrap();
            assert!(cp.as_slice().windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
