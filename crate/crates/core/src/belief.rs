//! Sufficient-statistic engine for the fusion center.
//!
//! The posterior over "how far the change has propagated" is carried by the
//! (L+1)-vector p_k, where p_{k,1} is the probability that no sensor has
//! changed and p_{k,ℓ} (ℓ ≥ 2) the probability that sensor ℓ-1 is the last
//! one changed. Everything here works with the rescaled statistic
//! q_{k,ℓ} = p_{k,ℓ} / (ρ p_{k,1}), which obeys the one-step recursion
//!
//!   q_{k,ℓ} = (1-ρ_{ℓ-1,ℓ})/(1-ρ) · Π_{j<ℓ} L_{k,j} · Σ_{j≤ℓ} q_{k-1,j} w_j^ℓ
//!
//! with q_{k,1} ≡ 1/ρ. The q-vector is held in log form: q grows like
//! exp(k · (L·D + |ln(1-ρ)|)) and would overflow binary floating point within
//! a few hundred slope units, while exact zeros arising from boundary
//! parameter values are kept as -inf with absorbing arithmetic, so the
//! oblivious/blocking reductions are exact rather than approximate.
//!
//! Cross-checks live alongside the recursion: a direct simplex-domain
//! recursion ([`update_p_direct`]), an exhaustive small-case posterior
//! ([`brute_force_posterior`]), and the pathwise product decomposition
//! ([`decompose`]) that factors each q_{k,ℓ} into a deterministic prior part,
//! running likelihood products, and a correction product Π(1 + ζ).

use crate::change_model::ChangeModel;
use crate::numeric::{log1p_exp, log_add_exp, log_sum_exp};
use crate::obs_model::ObservationModel;
use thiserror::Error;

/// Errors from the oracle and decomposition paths.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum BeliefError {
    #[error("enumeration limits exceeded: k={k} (max 12), L={sensors} (max 3)")]
    TooLarge { k: usize, sensors: usize },
    #[error("interior parameter rho[{index}] = {value} on the boundary; the product decomposition needs parameters in (0,1)")]
    ParamOnBoundary { index: usize, value: f64 },
}

/// Log-domain q-vector at a given time.
///
/// `log_q[0]` is pinned to `ln(1/ρ)`; entries may be `-inf` (exact zeros).
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState {
    log_q: Vec<f64>,
    time: u64,
}

impl BeliefState {
    /// Prior state at time 0: `q_{0,1} = 1/ρ` and
    /// `q_{0,ℓ} = Π_{j=0}^{ℓ-2} ρ_{j,j+1} (1-ρ_{ℓ-1,ℓ}) / (ρ(1-ρ))`.
    pub fn prior(model: &ChangeModel) -> Self {
        let lp1 = model.sensors() + 1;
        let ln_rho = model.rho_first().ln();
        let ln_1m_rho = (1.0 - model.rho_first()).ln();
        let mut log_q = Vec::with_capacity(lp1);
        log_q.push(-ln_rho);
        for l in 2..=lp1 {
            let lw = model.log_weight(1, l).expect("l in range");
            let coeff = (1.0 - model.geometric_param(l)).ln();
            log_q.push(lw + coeff - ln_rho - ln_1m_rho);
        }
        Self { log_q, time: 0 }
    }

    pub fn log_q(&self) -> &[f64] {
        &self.log_q
    }

    pub fn time(&self) -> u64 {
        self.time
    }

    /// `ln Σ_{ℓ≥2} q_{k,ℓ}`, the threshold-test statistic. `-inf` when every
    /// changed-component mass is exactly zero.
    pub fn statistic(&self) -> f64 {
        log_sum_exp(&self.log_q[1..])
    }
}

/// Precomputed recursion tables for one change model.
///
/// Immutable and `Sync`; build once and share across trials.
#[derive(Debug, Clone)]
pub struct BeliefUpdater {
    sensors: usize,
    /// `log_coeff[l-2] = ln(1-ρ_{l-1,l}) - ln(1-ρ)` for l = 2..=L+1.
    log_coeff: Vec<f64>,
    /// `log_w[l-2][j-1] = ln w_j^l` for l = 2..=L+1, j = 1..=l.
    log_w: Vec<Vec<f64>>,
}

impl BeliefUpdater {
    pub fn new(model: &ChangeModel) -> Self {
        let lp1 = model.sensors() + 1;
        let ln_1m_rho = (1.0 - model.rho_first()).ln();
        let mut log_coeff = Vec::with_capacity(lp1 - 1);
        let mut log_w = Vec::with_capacity(lp1 - 1);
        for l in 2..=lp1 {
            log_coeff.push((1.0 - model.geometric_param(l)).ln() - ln_1m_rho);
            log_w.push(
                (1..=l)
                    .map(|j| model.log_weight(j, l).expect("indices in range"))
                    .collect(),
            );
        }
        Self {
            sensors: model.sensors(),
            log_coeff,
            log_w,
        }
    }

    pub fn sensors(&self) -> usize {
        self.sensors
    }

    /// One observation step; writes the posterior at time k+1 into `out`.
    pub fn step_into<M: ObservationModel>(
        &self,
        prev: &BeliefState,
        obs: &M,
        z: &[f64],
        out: &mut BeliefState,
    ) {
        debug_assert_eq!(z.len(), self.sensors);
        debug_assert_eq!(prev.log_q.len(), self.sensors + 1);
        out.log_q.clear();
        out.log_q.push(prev.log_q[0]);
        let mut acc_llr = 0.0;
        for l in 2..=self.sensors + 1 {
            acc_llr += obs.log_likelihood_ratio(z[l - 2]);
            let w = &self.log_w[l - 2];
            // log-sum-exp over j ≤ l of q_{k-1,j} w_j^l, streaming with the
            // max term excluded so the two-term case matches log_add_exp.
            let mut max = f64::NEG_INFINITY;
            let mut arg_max = usize::MAX;
            for j in 1..=l {
                let t = prev.log_q[j - 1] + w[j - 1];
                if t > max {
                    max = t;
                    arg_max = j;
                }
            }
            let mixed = if arg_max == usize::MAX {
                f64::NEG_INFINITY
            } else {
                let mut rest = 0.0;
                for j in 1..=l {
                    if j == arg_max {
                        continue;
                    }
                    let t = prev.log_q[j - 1] + w[j - 1];
                    if t != f64::NEG_INFINITY {
                        rest += (t - max).exp();
                    }
                }
                max + rest.ln_1p()
            };
            out.log_q.push(self.log_coeff[l - 2] + acc_llr + mixed);
        }
        out.time = prev.time + 1;
    }

    /// One observation step, returning a fresh state.
    pub fn step<M: ObservationModel>(&self, prev: &BeliefState, obs: &M, z: &[f64]) -> BeliefState {
        let mut out = BeliefState {
            log_q: Vec::with_capacity(self.sensors + 1),
            time: 0,
        };
        self.step_into(prev, obs, z, &mut out);
        out
    }
}

/// Convenience one-shot update (builds the tables each call; hot paths should
/// hold a [`BeliefUpdater`]).
pub fn update<M: ObservationModel>(
    belief: &BeliefState,
    model: &ChangeModel,
    obs: &M,
    z: &[f64],
) -> BeliefState {
    BeliefUpdater::new(model).step(belief, obs, z)
}

/// Posterior probabilities of the propagation-extent events; lives on the
/// simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorVector {
    values: Vec<f64>,
}

impl PosteriorVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// `p_1 = P(no sensor changed | data)`.
    pub fn no_change(&self) -> f64 {
        self.values[0]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Inverse transform back to the log-q representation at the given time.
    pub fn to_belief(&self, rho: f64, time: u64) -> BeliefState {
        let ln_rho = rho.ln();
        let ln_p1 = self.values[0].ln();
        let mut log_q = Vec::with_capacity(self.values.len());
        log_q.push(-ln_rho);
        for &p in &self.values[1..] {
            log_q.push(p.ln() - ln_rho - ln_p1);
        }
        BeliefState { log_q, time }
    }
}

/// Simplex coordinates from the log-q state:
/// `p_1 = 1/(1 + ρ Σ_{j≥2} q_j)`, `p_ℓ = ρ q_ℓ p_1`.
pub fn p_from_q(belief: &BeliefState) -> PosteriorVector {
    let ln_rho = -belief.log_q[0];
    let s = log_sum_exp(&belief.log_q[1..]);
    let ln_p1 = -log1p_exp(ln_rho + s);
    let mut values = Vec::with_capacity(belief.log_q.len());
    values.push(ln_p1.exp());
    for &lq in &belief.log_q[1..] {
        values.push((ln_rho + lq + ln_p1).exp());
    }
    PosteriorVector { values }
}

/// Tables for the simplex-domain recursion; used by the grid DP (whose state
/// lives in p) and as a cross-check on the q path.
#[derive(Debug, Clone)]
pub struct DirectUpdater {
    /// `coeff[l-1] = 1 - ρ_{l-1,l}` for l = 1..=L+1.
    coeff: Vec<f64>,
    /// `weights[l-1][j-1] = w_j^l`, linear domain.
    weights: Vec<Vec<f64>>,
}

impl DirectUpdater {
    pub fn new(model: &ChangeModel) -> Self {
        let lp1 = model.sensors() + 1;
        let coeff = (1..=lp1)
            .map(|l| 1.0 - model.geometric_param(l))
            .collect();
        let weights = (1..=lp1)
            .map(|l| {
                (1..=l)
                    .map(|j| model.weight(j, l).expect("indices in range"))
                    .collect()
            })
            .collect();
        Self { coeff, weights }
    }

    /// Mixture weight of observation component `l` (sensors `< l` post-change)
    /// given the current posterior: `(1-ρ_{l-1,l}) Σ_{m≤l} w_m^l p_m`.
    pub fn predict_weight(&self, p: &[f64], l: usize) -> f64 {
        let w = &self.weights[l - 1];
        let mut s = 0.0;
        for (j, &wj) in w.iter().enumerate() {
            s += wj * p[j];
        }
        self.coeff[l - 1] * s
    }

    /// One step in the p domain given per-sensor likelihood ratios
    /// `lr[j] = f1(z_j)/f0(z_j)`; renormalizes to suppress drift.
    pub fn step(&self, p: &[f64], lr: &[f64], out: &mut [f64]) {
        let lp1 = p.len();
        let mut lr_prod = 1.0;
        let mut total = 0.0;
        for l in 1..=lp1 {
            if l >= 2 {
                lr_prod *= lr[l - 2];
            }
            let n = self.predict_weight(p, l) * lr_prod;
            out[l - 1] = n;
            total += n;
        }
        for v in out.iter_mut() {
            *v /= total;
        }
    }
}

/// Direct simplex-domain recursion (one-shot convenience).
pub fn update_p_direct<M: ObservationModel>(
    p: &PosteriorVector,
    model: &ChangeModel,
    obs: &M,
    z: &[f64],
) -> PosteriorVector {
    let updater = DirectUpdater::new(model);
    let lr: Vec<f64> = z.iter().map(|&zi| obs.log_likelihood_ratio(zi).exp()).collect();
    let mut out = vec![0.0; p.as_slice().len()];
    updater.step(p.as_slice(), &lr, &mut out);
    PosteriorVector { values: out }
}

/// Scalar recursion for the coincident-change statistic, log domain:
/// `ln q_k = joint_llr - ln(1-ρ) + ln(1 + q_{k-1})`.
///
/// This is what the full recursion collapses to when every interior
/// parameter is 1.
#[inline]
pub fn shiryaev_update(log_q: f64, joint_llr: f64, rho: f64) -> f64 {
    joint_llr - (1.0 - rho).ln() + log1p_exp(log_q)
}

/// Prior value of the scalar coincident-change statistic: `ln(1/(1-ρ))`.
#[inline]
pub fn shiryaev_prior(rho: f64) -> f64 {
    -(1.0 - rho).ln()
}

/// Exact posterior by exhaustive enumeration of change configurations.
///
/// Sums prior × likelihood over every non-decreasing (Γ₁..Γ_L) with entries
/// in {0..k} ∪ {">k"}; the independent oracle for all recursion tests. Only
/// feasible for k ≤ 12, L ≤ 3.
pub fn brute_force_posterior<M: ObservationModel>(
    model: &ChangeModel,
    obs: &M,
    z_history: &[Vec<f64>],
) -> Result<PosteriorVector, BeliefError> {
    let k = z_history.len();
    let sensors = model.sensors();
    if k > 12 || sensors > 3 {
        return Err(BeliefError::TooLarge { k, sensors });
    }

    // suffix[j][i] = Σ_{t=i..=k} llr(z_{t,j}), i = 1..=k+1
    let mut suffix = vec![vec![0.0; k + 2]; sensors];
    for j in 0..sensors {
        for i in (1..=k).rev() {
            suffix[j][i] = suffix[j][i + 1] + obs.log_likelihood_ratio(z_history[i - 1][j]);
        }
    }

    let beyond = k + 1; // encodes Γ > k
    let mut config = vec![0usize; sensors];
    let mut component_log = vec![f64::NEG_INFINITY; sensors + 1];
    loop {
        let mut lp = 0.0;
        let mut prev = 0usize;
        let mut changed = 0usize;
        for (j, &gj) in config.iter().enumerate() {
            let r = model.geometric_param(j + 1);
            if gj < beyond {
                changed += 1;
                let inc = gj - prev;
                if r == 1.0 {
                    if inc > 0 {
                        lp = f64::NEG_INFINITY;
                        break;
                    }
                } else {
                    lp += r.ln() + inc as f64 * (1.0 - r).ln();
                }
                prev = gj;
            } else {
                // First sensor past the horizon absorbs the tail; later ones
                // are implied (non-decreasing change times).
                if r == 1.0 {
                    lp = f64::NEG_INFINITY;
                } else {
                    lp += (k - prev + 1) as f64 * (1.0 - r).ln();
                }
                break;
            }
        }
        if lp != f64::NEG_INFINITY {
            let mut ll = 0.0;
            for (j, &gj) in config.iter().enumerate() {
                if gj < beyond {
                    ll += suffix[j][gj.max(1)];
                }
            }
            let comp = changed; // T_{k, changed+1}
            component_log[comp] = log_add_exp(component_log[comp], lp + ll);
        }
        if !next_non_decreasing(&mut config, beyond) {
            break;
        }
    }

    let total = log_sum_exp(&component_log);
    let values = component_log.iter().map(|&c| (c - total).exp()).collect();
    Ok(PosteriorVector { values })
}

fn next_non_decreasing(config: &mut [usize], cap: usize) -> bool {
    for i in (0..config.len()).rev() {
        if config[i] < cap {
            config[i] += 1;
            let v = config[i];
            for slot in config[i + 1..].iter_mut() {
                *slot = v;
            }
            return true;
        }
    }
    false
}

/// Pathwise product decomposition of the q-statistics.
///
/// For k ≥ 1 each component factors as
/// `q_{k,ℓ} = α_{k,ℓ} · Π_{j<ℓ} C_j · J_ℓ` with
/// `α_{k,ℓ} = ((1-ρ_{ℓ-1,ℓ})/(1-ρ))^k · Π_{j=1}^{ℓ-2} ρ_{j,j+1} ·
/// Σ_{j=0}^{ℓ-1} (1-ρ_{j,j+1})/(1-ρ)`, `C_j = Π_{m≤k} L_{m,j}`, and
/// `J_ℓ = Π_{m=0}^{k-2} (1+ζ_{m,ℓ})`, where ζ_{m,ℓ} couples the state at
/// time m to the likelihoods at time m+1:
///
///   ζ_{m,ℓ} = Σ_{j<ℓ} q_{m,j} w_j^ℓ C*_{m+1,j,ℓ}
///             / ((1-ρ_{ℓ-1,ℓ}) Π_{j<ℓ} L_{m+1,j} · Σ_{j≤ℓ} q_{m,j} w_j^ℓ)
///
/// with `C*_{m,n,ℓ} = Σ_{p=n-1}^{ℓ-2} (1-ρ_{p,p+1}) Π_{j≤p} L_{m,j}` (the
/// truncation of `B_{m,n,ℓ} = Σ_{p=n-1}^{ℓ-1} ...` that drops its last term,
/// hence ζ ≥ 0 identically). Everything is accumulated in log space.
#[derive(Debug, Clone)]
pub struct Decomposition {
    steps: usize,
    sensors: usize,
    log_alpha_rate: Vec<f64>,
    log_alpha_base: Vec<f64>,
    /// cum_llr[j][k] = Σ_{m=1..k} llr_{m,j+1}
    cum_llr: Vec<Vec<f64>>,
    /// log ζ_{m,ℓ} at [l-2][m], m = 0..=steps-2
    log_zeta: Vec<Vec<f64>>,
    /// log of the ζ upper bound B_{m+1,1,ℓ} / ((1-ρ_{ℓ-1,ℓ}) Π_j L_{m+1,j})
    log_zeta_bound: Vec<Vec<f64>>,
    /// cumulative Σ_{m'≤m} ln(1+ζ_{m',ℓ}) at [l-2][m]
    log_correction_cum: Vec<Vec<f64>>,
}

impl Decomposition {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn sensors(&self) -> usize {
        self.sensors
    }

    /// `ln ζ_{m,ℓ}` for m in 0..=steps-2, ℓ in 2..=L+1.
    pub fn log_zeta(&self, m: usize, l: usize) -> f64 {
        self.log_zeta[l - 2][m]
    }

    pub fn log_zeta_bound(&self, m: usize, l: usize) -> f64 {
        self.log_zeta_bound[l - 2][m]
    }

    /// `ln J_ℓ` truncated at horizon `k` (the factor entering q_{k,ℓ}).
    pub fn log_correction(&self, k: usize, l: usize) -> f64 {
        if k < 2 {
            0.0
        } else {
            self.log_correction_cum[l - 2][k - 2]
        }
    }

    /// Mean of `ln(1+ζ_{m,ℓ})` over all available m; the per-path summand of
    /// the slope-contribution limits.
    pub fn mean_log_one_plus_zeta(&self, l: usize) -> f64 {
        let cum = &self.log_correction_cum[l - 2];
        match cum.last() {
            Some(&total) => total / cum.len() as f64,
            None => 0.0,
        }
    }

    /// Reconstructed `ln q_{k,ℓ}` from the α·C·J factors, k ≥ 1.
    pub fn log_q_reconstructed(&self, k: usize, l: usize) -> f64 {
        assert!((1..=self.steps).contains(&k));
        let mut acc = self.log_alpha_base[l - 2] + k as f64 * self.log_alpha_rate[l - 2];
        for j in 0..(l - 1) {
            acc += self.cum_llr[j][k];
        }
        acc + self.log_correction(k, l)
    }
}

/// Runs the recursion over `z_history` and extracts the decomposition.
///
/// Interior parameters must lie strictly inside (0,1); the boundary cases are
/// exactly the oblivious/blocking reductions and should be reduced first.
pub fn decompose<M: ObservationModel>(
    model: &ChangeModel,
    obs: &M,
    z_history: &[Vec<f64>],
) -> Result<Decomposition, BeliefError> {
    let sensors = model.sensors();
    for (i, &r) in model.rho().iter().enumerate().skip(1) {
        if r == 0.0 || r == 1.0 {
            return Err(BeliefError::ParamOnBoundary { index: i, value: r });
        }
    }
    let steps = z_history.len();
    let lp1 = sensors + 1;
    let ln_1m_rho = (1.0 - model.rho_first()).ln();

    // Rate and base of the deterministic prior factor α.
    let mut log_alpha_rate = Vec::with_capacity(lp1 - 1);
    let mut log_alpha_base = Vec::with_capacity(lp1 - 1);
    for l in 2..=lp1 {
        log_alpha_rate.push((1.0 - model.geometric_param(l)).ln() - ln_1m_rho);
        let mut base = 0.0;
        for j in 1..=(l.saturating_sub(2)) {
            base += model.geometric_param(j + 1).ln();
        }
        let sum: f64 = (0..l).map(|j| 1.0 - model.geometric_param(j + 1)).sum();
        log_alpha_base.push(base + sum.ln() - ln_1m_rho);
    }

    // Belief chain and per-time llr prefixes.
    let updater = BeliefUpdater::new(model);
    let mut chain = Vec::with_capacity(steps + 1);
    chain.push(BeliefState::prior(model));
    let mut cum_llr = vec![vec![0.0; steps + 1]; sensors];
    // llr_prefix[t][j] = Σ_{i=1..=j} llr_{t,i}, j = 0..=L
    let mut llr_prefix = vec![vec![0.0; lp1]; steps + 1];
    for t in 1..=steps {
        let z = &z_history[t - 1];
        assert_eq!(z.len(), sensors, "observation row {t} has wrong width");
        for j in 0..sensors {
            let llr = obs.log_likelihood_ratio(z[j]);
            cum_llr[j][t] = cum_llr[j][t - 1] + llr;
            llr_prefix[t][j + 1] = llr_prefix[t][j] + llr;
        }
        let next = updater.step(chain.last().unwrap(), obs, z);
        chain.push(next);
    }

    let ln_one_minus: Vec<f64> = (1..=lp1)
        .map(|l| (1.0 - model.geometric_param(l)).ln())
        .collect();

    let zeta_rows = steps.saturating_sub(1);
    let mut log_zeta = vec![Vec::with_capacity(zeta_rows); lp1 - 1];
    let mut log_zeta_bound = vec![Vec::with_capacity(zeta_rows); lp1 - 1];
    let mut log_correction_cum = vec![Vec::with_capacity(zeta_rows); lp1 - 1];
    let mut terms = Vec::with_capacity(lp1);
    for l in 2..=lp1 {
        let mut cum = 0.0;
        for m in 0..zeta_rows {
            let q_m = chain[m].log_q();
            let pref = &llr_prefix[m + 1];

            // numerator: Σ_{j<ℓ} q_{m,j} w_j^ℓ C*_{m+1,j,ℓ}
            terms.clear();
            for j in 1..l {
                let base = q_m[j - 1] + model.log_weight(j, l).expect("in range");
                // C*_{m+1,j,ℓ} = Σ_{p=j-1}^{ℓ-2} (1-ρ_{p,p+1}) Π_{i≤p} L_{m+1,i}
                let mut c_terms = Vec::with_capacity(l - j);
                for p in (j - 1)..=(l - 2) {
                    c_terms.push(ln_one_minus[p] + pref[p]);
                }
                terms.push(base + log_sum_exp(&c_terms));
            }
            let num = log_sum_exp(&terms);

            // denominator: (1-ρ_{ℓ-1,ℓ}) Π_{j<ℓ} L_{m+1,j} Σ_{j≤ℓ} q_{m,j} w_j^ℓ
            terms.clear();
            for j in 1..=l {
                terms.push(q_m[j - 1] + model.log_weight(j, l).expect("in range"));
            }
            let den = ln_one_minus[l - 1] + pref[l - 1] + log_sum_exp(&terms);

            let lz = num - den;
            log_zeta[l - 2].push(lz);

            // B_{m+1,1,ℓ} over the same scale factor.
            terms.clear();
            for p in 0..=(l - 1) {
                terms.push(ln_one_minus[p] + pref[p]);
            }
            log_zeta_bound[l - 2].push(log_sum_exp(&terms) - ln_one_minus[l - 1] - pref[l - 1]);

            cum += log1p_exp(lz);
            log_correction_cum[l - 2].push(cum);
        }
    }

    Ok(Decomposition {
        steps,
        sensors,
        log_alpha_rate,
        log_alpha_base,
        cum_llr,
        log_zeta,
        log_zeta_bound,
        log_correction_cum,
    })
}
