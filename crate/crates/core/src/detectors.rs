//! Stopping rules and threshold calibration.
//!
//! Three detectors share one simulation loop: the threshold test on the full
//! belief statistic `ln Σ_{ℓ≥2} q_{k,ℓ}`, a single-sensor test that feeds the
//! scalar posterior-ratio recursion with sensor 1 only, and a mismatched test
//! that feeds it the joint likelihood of all sensors under the (wrong)
//! assumption of instantaneous propagation. All three stop at the first
//! `k ≥ 0` with statistic ≥ A; k = 0 checks the prior, so A = -inf stops
//! immediately.
//!
//! Calibration: with `A = ln(1/(ρα))` the false-alarm probability of each
//! detector is at most `1/(1 + ρ e^A) = α/(1+α) ≤ α`, because a false alarm
//! only involves pre-change behavior and the marginal law of Γ₁.

use crate::belief::{shiryaev_prior, shiryaev_update, BeliefState, BeliefUpdater};
use crate::change_model::ChangeModel;
use crate::obs_model::ObservationModel;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectorError {
    #[error("{name} = {value} out of range ({requirement})")]
    OutOfRange {
        name: &'static str,
        value: f64,
        requirement: &'static str,
    },
}

/// Which statistic drives the stopping rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    /// Threshold test on the full propagation-aware belief statistic.
    NuA,
    /// Scalar recursion fed with sensor 1 only.
    SingleSensor,
    /// Scalar recursion fed with the joint likelihood of all sensors
    /// (instantaneous-propagation model, true ρ).
    Mismatched,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 3] =
        [DetectorKind::NuA, DetectorKind::SingleSensor, DetectorKind::Mismatched];

    pub fn name(&self) -> &'static str {
        match self {
            DetectorKind::NuA => "nu_a",
            DetectorKind::SingleSensor => "single",
            DetectorKind::Mismatched => "mismatched",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "nu_a" | "nua" => Some(DetectorKind::NuA),
            "single" | "single_sensor" => Some(DetectorKind::SingleSensor),
            "mismatched" => Some(DetectorKind::Mismatched),
            _ => None,
        }
    }
}

impl std::fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A detector kind plus its log-domain threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorSpec {
    pub kind: DetectorKind,
    pub threshold: f64,
}

impl DetectorSpec {
    pub fn new(kind: DetectorKind, threshold: f64) -> Self {
        Self { kind, threshold }
    }
}

/// Result of one simulated trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopOutcome {
    /// First k ≥ 0 at which the statistic reached the threshold (or the cap).
    pub tau: u64,
    /// True when the horizon cap was hit before a crossing.
    pub stopped_by_cap: bool,
    /// Realized disruption time, for scoring.
    pub gamma1: u64,
}

impl StopOutcome {
    pub fn false_alarm(&self) -> bool {
        self.tau < self.gamma1
    }

    pub fn delay(&self) -> u64 {
        self.tau.saturating_sub(self.gamma1)
    }
}

/// Threshold guaranteeing a false-alarm probability of at most `alpha`:
/// `A = ln(1/(ρ·alpha))`.
pub fn threshold_for_alpha(rho: f64, alpha: f64) -> Result<f64, DetectorError> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(DetectorError::OutOfRange {
            name: "rho",
            value: rho,
            requirement: "must lie in (0,1)",
        });
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(DetectorError::OutOfRange {
            name: "alpha",
            value: alpha,
            requirement: "must lie in (0,1]",
        });
    }
    Ok(-(rho * alpha).ln())
}

/// Default trial cap: a post-change crossing allowance of
/// `12(A + |ln ρ|)/(D + |ln(1-ρ)|)` steps plus a pre-change waiting
/// allowance covering Γ₁ up to its 1e-4 upper tail, keeping the expected
/// censored fraction well under the 1e-3 acceptance limit.
pub fn default_k_max<M: ObservationModel>(model: &ChangeModel, obs: &M, threshold: f64) -> u64 {
    let rho = model.rho_first();
    let denom = obs.kl_divergence() + (1.0 - rho).ln().abs();
    let a = threshold.max(0.0);
    let crossing = (12.0 * (a + rho.ln().abs()) / denom).ceil();
    let waiting = (1e4f64.ln() / (1.0 - rho).ln().abs()).ceil();
    (crossing + waiting).max(64.0) as u64
}

/// Simulates one trajectory under `model`/`obs` and runs the stopping rule.
///
/// Change points and observations are drawn on the fly from `rng`; the
/// function is pure given the stream, so trials parallelize with per-trial
/// derived streams. Observation draws are laid out identically for every
/// detector kind (all L sensors sampled each step), so different detectors
/// see the same trajectory on the same stream.
pub fn run_detector<M: ObservationModel, R: Rng + ?Sized>(
    spec: &DetectorSpec,
    model: &ChangeModel,
    obs: &M,
    rng: &mut R,
    k_max: u64,
) -> StopOutcome {
    let change = model
        .sample_change_points(rng)
        .expect("run_detector requires a non-blocking model");
    let gamma1 = change.first();
    let sensors = model.sensors();
    let rho = model.rho_first();

    enum State {
        Full(BeliefUpdater, BeliefState, BeliefState),
        Scalar(f64),
    }

    let mut state = match spec.kind {
        DetectorKind::NuA => {
            let updater = BeliefUpdater::new(model);
            let prior = BeliefState::prior(model);
            let scratch = prior.clone();
            State::Full(updater, prior, scratch)
        }
        DetectorKind::SingleSensor | DetectorKind::Mismatched => State::Scalar(shiryaev_prior(rho)),
    };

    let statistic = |state: &State| match state {
        State::Full(_, b, _) => b.statistic(),
        State::Scalar(s) => *s,
    };

    if statistic(&state) >= spec.threshold {
        return StopOutcome {
            tau: 0,
            stopped_by_cap: false,
            gamma1,
        };
    }

    let mut z = vec![0.0; sensors];
    for k in 1..=k_max {
        for (j, slot) in z.iter_mut().enumerate() {
            let post = k >= change.gamma(j + 1);
            *slot = obs.sample(post, rng);
        }
        match &mut state {
            State::Full(updater, current, scratch) => {
                updater.step_into(current, obs, &z, scratch);
                std::mem::swap(current, scratch);
            }
            State::Scalar(s) => {
                let joint = match spec.kind {
                    DetectorKind::SingleSensor => obs.log_likelihood_ratio(z[0]),
                    _ => z.iter().map(|&zi| obs.log_likelihood_ratio(zi)).sum(),
                };
                *s = shiryaev_update(*s, joint, rho);
            }
        }
        if statistic(&state) >= spec.threshold {
            return StopOutcome {
                tau: k,
                stopped_by_cap: false,
                gamma1,
            };
        }
    }
    StopOutcome {
        tau: k_max,
        stopped_by_cap: true,
        gamma1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::p_from_q;
    use crate::obs_model::GaussianShiftModel;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(rho: &[f64]) -> ChangeModel {
        ChangeModel::new(rho.len(), rho.to_vec()).unwrap()
    }

    #[test]
    fn threshold_reference_values() {
        assert_abs_diff_eq!(
            threshold_for_alpha(0.001, 1e-3).unwrap(),
            1e6f64.ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            threshold_for_alpha(0.5, 1.0).unwrap(),
            2.0f64.ln(),
            epsilon = 1e-12
        );
        assert!(threshold_for_alpha(0.0, 0.5).is_err());
        assert!(threshold_for_alpha(0.5, 0.0).is_err());
        assert!(threshold_for_alpha(0.5, 1.5).is_err());
    }

    #[test]
    fn minus_infinity_threshold_stops_at_zero() {
        let m = model(&[0.01, 0.3]);
        let obs = GaussianShiftModel::new(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in DetectorKind::ALL {
            let spec = DetectorSpec::new(kind, f64::NEG_INFINITY);
            let out = run_detector(&spec, &m, &obs, &mut rng, 100);
            assert_eq!(out.tau, 0);
            assert!(!out.stopped_by_cap);
        }
    }

    #[test]
    fn larger_threshold_never_stops_earlier() {
        let m = model(&[0.05, 0.3]);
        let obs = GaussianShiftModel::new(1.0);
        for trial in 0..50u64 {
            let mut taus = Vec::new();
            for a in [1.0, 2.0, 4.0, 8.0] {
                let mut rng = ChaCha8Rng::seed_from_u64(1000);
                rng.set_stream(trial);
                let spec = DetectorSpec::new(DetectorKind::NuA, a);
                taus.push(run_detector(&spec, &m, &obs, &mut rng, 5000).tau);
            }
            assert!(taus.windows(2).all(|w| w[0] <= w[1]), "taus {taus:?}");
        }
    }

    #[test]
    fn coincident_model_nu_a_equals_mismatched() {
        let m = model(&[0.02, 1.0, 1.0]);
        let obs = GaussianShiftModel::new(1.0);
        let a = threshold_for_alpha(0.02, 1e-2).unwrap();
        for trial in 0..200u64 {
            let mut rng1 = ChaCha8Rng::seed_from_u64(42);
            rng1.set_stream(trial);
            let mut rng2 = ChaCha8Rng::seed_from_u64(42);
            rng2.set_stream(trial);
            let nu = run_detector(
                &DetectorSpec::new(DetectorKind::NuA, a),
                &m,
                &obs,
                &mut rng1,
                20_000,
            );
            let mm = run_detector(
                &DetectorSpec::new(DetectorKind::Mismatched, a),
                &m,
                &obs,
                &mut rng2,
                20_000,
            );
            assert_eq!(nu, mm);
        }
    }

    #[test]
    fn single_sensor_ignores_downstream_parameters() {
        let m1 = model(&[0.05, 0.1]);
        let m2 = model(&[0.05, 0.9]);
        let obs = GaussianShiftModel::new(1.0);
        let a = 5.0;
        for trial in 0..100u64 {
            let mut rng1 = ChaCha8Rng::seed_from_u64(7);
            rng1.set_stream(trial);
            let mut rng2 = ChaCha8Rng::seed_from_u64(7);
            rng2.set_stream(trial);
            let spec = DetectorSpec::new(DetectorKind::SingleSensor, a);
            let o1 = run_detector(&spec, &m1, &obs, &mut rng1, 10_000);
            let o2 = run_detector(&spec, &m2, &obs, &mut rng2, 10_000);
            assert_eq!(o1, o2);
        }
    }

    #[test]
    fn q_space_and_p_space_conditions_fire_together() {
        let m = model(&[0.05, 0.3]);
        let obs = GaussianShiftModel::new(1.0);
        let a: f64 = 4.0;
        let p_threshold = 1.0 / (1.0 + m.rho_first() * a.exp());
        let updater = BeliefUpdater::new(&m);
        for trial in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            rng.set_stream(trial);
            let change = m.sample_change_points(&mut rng).unwrap();
            let mut b = BeliefState::prior(&m);
            let mut fired_q = None;
            let mut fired_p = None;
            for k in 1..=3000u64 {
                let z: Vec<f64> = (1..=2)
                    .map(|j| obs.sample(k >= change.gamma(j), &mut rng))
                    .collect();
                b = updater.step(&b, &obs, &z);
                if fired_q.is_none() && b.statistic() >= a {
                    fired_q = Some(k);
                }
                if fired_p.is_none() && p_from_q(&b).no_change() <= p_threshold {
                    fired_p = Some(k);
                }
                if fired_q.is_some() && fired_p.is_some() {
                    break;
                }
            }
            assert_eq!(fired_q, fired_p);
        }
    }

    #[test]
    fn default_cap_covers_waiting_time() {
        let m = model(&[0.001, 0.1]);
        let obs = GaussianShiftModel::new(1.0);
        let a = threshold_for_alpha(0.001, 1e-3).unwrap();
        let cap = default_k_max(&m, &obs, a);
        // Must dominate the 1e-4 tail of Γ₁.
        let tail = (1e4f64.ln() / (1.0f64 - 0.001).ln().abs()).ceil() as u64;
        assert!(cap >= tail);
    }
}
