//! Change-process detection across a linear sensor array.
//!
//! A disruption propagates sensor to sensor with geometric delays; a fusion
//! center watching all observation streams runs an exact Bayesian recursion
//! over "how far has the change travelled" and stops with a threshold rule.
//! The crate provides the change-process model, the belief recursions and
//! their independent oracles, the threshold detectors with calibration, a
//! finite-horizon dynamic-programming solver on the belief simplex, and
//! deterministic parallel Monte Carlo estimation of the delay/false-alarm
//! trade-off.

pub mod belief;
pub mod detectors;
pub mod dp;
pub mod change_model;
pub mod numeric;
pub mod obs_model;

pub use belief::{BeliefState, BeliefUpdater, PosteriorVector};
pub use detectors::{DetectorKind, DetectorSpec, StopOutcome};
pub use change_model::{ChangeModel, ChangeModelError, ChangePoints, SensorMergeMap};
pub use obs_model::{GaussianShiftModel, ObservationModel};
