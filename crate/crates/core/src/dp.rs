//! Finite-horizon dynamic program on the belief simplex (L ≤ 2).
//!
//! Backward induction for the stopping problem with terminal cost p₁ and
//! running cost c(1-p₁):
//!
//!   V_0(p) = p₁,   V_{d+1}(p) = min{ p₁, c(1-p₁) + E[V_d(p') | p] }
//!
//! where d counts steps to the horizon (the model is time-homogeneous, so
//! J_k^T = V_{T-k} and both horizon-monotonicity directions collapse to
//! V_{d+1} ≤ V_d). The one-step expectation integrates the next observation
//! vector against its predictive mixture: component ℓ has sensors < ℓ
//! post-change with weight (1-ρ_{ℓ-1,ℓ}) Σ_m w_m^ℓ p_m, and each Gaussian
//! component is integrated by tensor Gauss-Hermite quadrature (32 nodes per
//! sensor). Belief propagation runs in the p domain since the grid lives
//! there; interpolation is barycentric on the natural triangulation, which
//! reproduces affine functions exactly, so the terminal stage is exact.
//!
//! The quadrature targets and interpolation stencils do not depend on the
//! stage, so they are precomputed once into a sparse transition table and
//! every backup is a sparse matrix-vector product.

use crate::belief::DirectUpdater;
use crate::change_model::ChangeModel;
use crate::obs_model::{GaussianShiftModel, ObservationModel};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DpError {
    #[error("grid step {step} too coarse; need h <= 0.1")]
    GridTooCoarse { step: f64 },
    #[error("grid supports L in {{1, 2}}, got {dim}")]
    UnsupportedDimension { dim: usize },
    #[error("model has {model} sensors but grid is for {grid}")]
    DimensionMismatch { model: usize, grid: usize },
}

/// Regular lattice on the standard simplex in L+1 coordinates, L ∈ {1, 2}.
///
/// Nodes are the points with coordinates in multiples of `1/n`; stored as
/// `[p1, p2, p3]` with the last entry 0 when L = 1.
#[derive(Debug, Clone)]
pub struct SimplexGrid {
    dim: usize,
    n: usize,
    step: f64,
    nodes: Vec<[f64; 3]>,
    /// L=2: start of row i (p2 = i/n) in `nodes`.
    row_offset: Vec<usize>,
}

impl SimplexGrid {
    /// `dim` is the sensor count L; `step` must be `1/n` for integer n and
    /// at most 0.1.
    pub fn new(dim: usize, step: f64) -> Result<Self, DpError> {
        if !(1..=2).contains(&dim) {
            return Err(DpError::UnsupportedDimension { dim });
        }
        if !(step > 0.0 && step <= 0.1) {
            return Err(DpError::GridTooCoarse { step });
        }
        let n = (1.0 / step).round() as usize;
        let nf = n as f64;
        let mut nodes = Vec::new();
        let mut row_offset = Vec::new();
        match dim {
            1 => {
                for i in 0..=n {
                    nodes.push([(n - i) as f64 / nf, i as f64 / nf, 0.0]);
                }
            }
            _ => {
                for i in 0..=n {
                    row_offset.push(nodes.len());
                    for j in 0..=(n - i) {
                        nodes.push([
                            (n - i - j) as f64 / nf,
                            i as f64 / nf,
                            j as f64 / nf,
                        ]);
                    }
                }
            }
        }
        Ok(Self {
            dim,
            n,
            step: 1.0 / nf,
            nodes,
            row_offset,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: usize) -> [f64; 3] {
        self.nodes[id]
    }

    pub fn nodes(&self) -> &[[f64; 3]] {
        &self.nodes
    }

    fn id2(&self, i: usize, j: usize) -> usize {
        self.row_offset[i] + j
    }

    /// Barycentric interpolation stencil for a point `p` on the simplex:
    /// up to 3 node ids with convex weights. Exact for affine functions.
    pub fn stencil(&self, p: &[f64]) -> ([usize; 3], [f64; 3]) {
        let nf = self.n as f64;
        match self.dim {
            1 => {
                let x = (p[1].clamp(0.0, 1.0)) * nf;
                let i0 = (x.floor() as usize).min(self.n - 1);
                let f = x - i0 as f64;
                ([i0, i0 + 1, 0], [1.0 - f, f, 0.0])
            }
            _ => {
                let mut x = p[1].max(0.0) * nf;
                let mut y = p[2].max(0.0) * nf;
                let over = x + y - nf;
                if over > 0.0 {
                    // numerical spill outside the simplex: pull back along
                    // the diagonal
                    x -= over * x / (x + y);
                    y = nf - x;
                }
                let mut i0 = (x.floor() as usize).min(self.n);
                let mut j0 = (y.floor() as usize).min(self.n);
                if i0 + j0 >= self.n {
                    // corner cell collapsed to the hypotenuse vertex
                    if i0 + j0 > self.n {
                        let spill = i0 + j0 - self.n;
                        i0 -= spill.min(i0);
                        j0 = self.n - i0;
                    }
                    return ([self.id2(i0, j0), 0, 0], [1.0, 0.0, 0.0]);
                }
                let fx = x - i0 as f64;
                let fy = y - j0 as f64;
                if fx + fy <= 1.0 {
                    (
                        [
                            self.id2(i0, j0),
                            self.id2(i0 + 1, j0),
                            self.id2(i0, j0 + 1),
                        ],
                        [1.0 - fx - fy, fx, fy],
                    )
                } else if i0 + j0 + 2 <= self.n {
                    (
                        [
                            self.id2(i0 + 1, j0 + 1),
                            self.id2(i0, j0 + 1),
                            self.id2(i0 + 1, j0),
                        ],
                        [fx + fy - 1.0, 1.0 - fx, 1.0 - fy],
                    )
                } else {
                    // On the hypotenuse within rounding: the upper-triangle
                    // apex would leave the lattice, so split along the edge.
                    let s = fx + fy;
                    (
                        [self.id2(i0 + 1, j0), self.id2(i0, j0 + 1), 0],
                        [fx / s, fy / s, 0.0],
                    )
                }
            }
        }
    }

    /// Linear interpolation of grid values at `p`.
    pub fn interpolate(&self, values: &[f64], p: &[f64]) -> f64 {
        let (ids, ws) = self.stencil(p);
        ws.iter()
            .zip(ids.iter())
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, &id)| w * values[id])
            .sum()
    }

    /// Lattice neighbors of a node (for boundary detection).
    pub fn neighbors(&self, id: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(6);
        match self.dim {
            1 => {
                if id > 0 {
                    out.push(id - 1);
                }
                if id + 1 < self.nodes.len() {
                    out.push(id + 1);
                }
            }
            _ => {
                let nf = self.n as f64;
                let p = self.nodes[id];
                let i = (p[1] * nf).round() as i64;
                let j = (p[2] * nf).round() as i64;
                let n = self.n as i64;
                for (di, dj) in [(1, 0), (-1, 0), (0, 1), (0, -1), (1, -1), (-1, 1)] {
                    let (ni, nj) = (i + di, j + dj);
                    if ni >= 0 && nj >= 0 && ni + nj <= n {
                        out.push(self.id2(ni as usize, nj as usize));
                    }
                }
            }
        }
        out
    }

    /// Uniform random point on the simplex (by sorted-uniform spacings).
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 3] {
        match self.dim {
            1 => {
                let u: f64 = rng.gen();
                [1.0 - u, u, 0.0]
            }
            _ => {
                let mut a: f64 = rng.gen();
                let mut b: f64 = rng.gen();
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                }
                [a, b - a, 1.0 - b]
            }
        }
    }
}

/// Gauss-Hermite nodes and weights for ∫ f(x) e^{-x²} dx, weights normalized
/// to sum to 1 (so they integrate against N(0, 1/2); use x·√2 + μ for a unit
/// Gaussian). Newton iteration on the orthonormal recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5; // π^{-1/4}
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = (n + 1) / 2;
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / j as f64).sqrt() * p2 - ((j as f64 - 1.0) / j as f64).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        nodes[i] = z;
        nodes[n - 1 - i] = -z;
        weights[i] = 2.0 / (pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    let total: f64 = weights.iter().sum(); // = √π
    for w in weights.iter_mut() {
        *w /= total;
    }
    (nodes, weights)
}

/// One stage of the backward induction.
#[derive(Debug, Clone)]
pub struct ValueFunction {
    /// J at each grid node.
    pub values: Vec<f64>,
    /// One-step expectation E[J_next | p] at each node; `None` at the
    /// terminal stage.
    pub expected_next: Option<Vec<f64>>,
    /// Steps remaining to the horizon (0 = terminal).
    pub steps_to_horizon: usize,
    /// Per-unit delay cost c.
    pub cost: f64,
}

/// Sparse one-step transition table: for each node, the merged list of
/// (target node, weight) pairs of the predictive expectation.
struct TransitionTable {
    entries: Vec<Vec<(u32, f64)>>,
}

const GH_NODES: usize = 32;
const COEFF_CUTOFF: f64 = 1e-18;

fn build_transitions(
    model: &ChangeModel,
    obs: &GaussianShiftModel,
    grid: &SimplexGrid,
) -> TransitionTable {
    let sensors = model.sensors();
    let lp1 = sensors + 1;
    let (gh_x, gh_w) = gauss_hermite(GH_NODES);
    let sqrt2 = std::f64::consts::SQRT_2;
    let direct = DirectUpdater::new(model);

    // Per component ℓ: the likelihood-ratio vectors at every joint
    // quadrature node (shared by all grid nodes).
    let joint_count = GH_NODES.pow(sensors as u32);
    let mut comp_lr: Vec<Vec<([f64; 2], f64)>> = Vec::with_capacity(lp1);
    for l in 1..=lp1 {
        let mut rows = Vec::with_capacity(joint_count);
        for joint in 0..joint_count {
            let mut lr = [1.0f64; 2];
            let mut w = 1.0;
            let mut rem = joint;
            for s in 0..sensors {
                let gi = rem % GH_NODES;
                rem /= GH_NODES;
                let mean = if s + 1 <= l - 1 { obs.theta() } else { 0.0 };
                let z = mean + sqrt2 * gh_x[gi];
                lr[s] = obs.log_likelihood_ratio(z).exp();
                w *= gh_w[gi];
            }
            if w >= COEFF_CUTOFF {
                rows.push((lr, w));
            }
        }
        comp_lr.push(rows);
    }

    let entries: Vec<Vec<(u32, f64)>> = grid
        .nodes()
        .par_iter()
        .map(|p| {
            let pv = &p[..lp1];
            let mut raw: Vec<(u32, f64)> = Vec::new();
            let mut out = [0.0f64; 3];
            for l in 1..=lp1 {
                let lam = direct.predict_weight(pv, l);
                if lam <= 0.0 {
                    continue;
                }
                for (lr, w) in &comp_lr[l - 1] {
                    let coeff = lam * w;
                    if coeff < COEFF_CUTOFF {
                        continue;
                    }
                    direct.step(pv, &lr[..sensors], &mut out[..lp1]);
                    let (ids, ws) = grid.stencil(&out);
                    for (id, sw) in ids.iter().zip(ws.iter()) {
                        if *sw > 0.0 {
                            raw.push((*id as u32, sw * coeff));
                        }
                    }
                }
            }
            raw.sort_unstable_by_key(|e| e.0);
            let mut merged: Vec<(u32, f64)> = Vec::with_capacity(raw.len() / 4);
            for (id, w) in raw {
                match merged.last_mut() {
                    Some(last) if last.0 == id => last.1 += w,
                    _ => merged.push((id, w)),
                }
            }
            merged
        })
        .collect();

    TransitionTable { entries }
}

/// Backward induction over `horizon` stages.
///
/// Returns stages indexed by steps-to-horizon: `result[0]` is the terminal
/// stage `J(p) = p₁` and `result[horizon]` the deepest stage.
pub fn value_iterate(
    model: &ChangeModel,
    obs: &GaussianShiftModel,
    cost: f64,
    grid: &SimplexGrid,
    horizon: usize,
) -> Result<Vec<ValueFunction>, DpError> {
    assert!(cost > 0.0, "delay cost must be positive");
    assert!(horizon >= 1, "horizon must be at least 1");
    if model.sensors() != grid.dim() {
        return Err(DpError::DimensionMismatch {
            model: model.sensors(),
            grid: grid.dim(),
        });
    }
    let table = build_transitions(model, obs, grid);
    let p1: Vec<f64> = grid.nodes().iter().map(|p| p[0]).collect();

    let mut stages = Vec::with_capacity(horizon + 1);
    stages.push(ValueFunction {
        values: p1.clone(),
        expected_next: None,
        steps_to_horizon: 0,
        cost,
    });
    for d in 1..=horizon {
        let prev = &stages[d - 1].values;
        let expected: Vec<f64> = table
            .entries
            .par_iter()
            .map(|row| row.iter().map(|&(id, w)| w * prev[id as usize]).sum())
            .collect();
        let values: Vec<f64> = expected
            .iter()
            .zip(p1.iter())
            .map(|(&a, &p)| p.min(cost * (1.0 - p) + a))
            .collect();
        stages.push(ValueFunction {
            values,
            expected_next: Some(expected),
            steps_to_horizon: d,
            cost,
        });
    }
    Ok(stages)
}

/// Default horizon for a given delay cost: `20·ceil(1/c)`, capped at 400.
pub fn default_horizon(cost: f64) -> usize {
    ((20.0 * (1.0 / cost).ceil()) as usize).min(400)
}

/// Node classification of a solved stage.
#[derive(Debug, Clone)]
pub struct StopRegion {
    /// True where stopping is optimal: `p₁(1+c) - c ≤ E[J_next | p]`.
    pub stop: Vec<bool>,
    /// `E[J_next | p]` restricted to the continue branch, i.e. the
    /// continuation value minus the running cost: `J - c(1-p₁)` there.
    pub continue_value: Vec<f64>,
}

/// Classifies each node of a (deep-horizon) stage as Stop or Continue.
///
/// Panics if called on the terminal stage (no expectation available).
pub fn extract_stop_region(vf: &ValueFunction, grid: &SimplexGrid) -> StopRegion {
    let expected = vf
        .expected_next
        .as_ref()
        .expect("stop region needs a non-terminal stage");
    let c = vf.cost;
    let stop: Vec<bool> = grid
        .nodes()
        .iter()
        .zip(expected.iter())
        .map(|(p, &a)| p[0] * (1.0 + c) - c <= a)
        .collect();
    StopRegion {
        stop,
        continue_value: expected.clone(),
    }
}

/// Concavity probe report.
#[derive(Debug, Clone)]
pub struct ConcavityReport {
    pub probes: usize,
    pub violations: usize,
    pub worst_violation: f64,
    pub epsilon: f64,
}

/// Samples random simplex segments and checks midpoint concavity of the
/// interpolated stage within `ε = 2h + quadrature tolerance`.
pub fn check_concavity<R: Rng + ?Sized>(
    vf: &ValueFunction,
    grid: &SimplexGrid,
    n_probes: usize,
    rng: &mut R,
) -> ConcavityReport {
    let epsilon = 2.0 * grid.step() + 1e-3;
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..n_probes {
        let a = grid.sample_point(rng);
        let b = grid.sample_point(rng);
        let lambda: f64 = rng.gen();
        let mix = [
            lambda * a[0] + (1.0 - lambda) * b[0],
            lambda * a[1] + (1.0 - lambda) * b[1],
            lambda * a[2] + (1.0 - lambda) * b[2],
        ];
        let ja = grid.interpolate(&vf.values, &a);
        let jb = grid.interpolate(&vf.values, &b);
        let jmix = grid.interpolate(&vf.values, &mix);
        let gap = lambda * ja + (1.0 - lambda) * jb - jmix;
        if gap > worst {
            worst = gap;
        }
        if gap > epsilon {
            violations += 1;
        }
    }
    ConcavityReport {
        probes: n_probes,
        violations,
        worst_violation: worst,
        epsilon,
    }
}

/// How far the stop boundary of a solved stage sits from the limiting level
/// set `Σ_{j≥2} q_j = 1/c`, which in simplex coordinates is the hyperplane
/// `p₁ = c/(c+ρ)`.
///
/// At a boundary point the offset is exactly `|A(p) - (1-ρ)p₁| / (c+ρ)` in
/// p₁ units, so the maximum of that quantity over boundary nodes measures
/// the deviation without grid quantization.
pub fn stop_boundary_deviation(
    vf: &ValueFunction,
    grid: &SimplexGrid,
    model: &ChangeModel,
) -> f64 {
    let region = extract_stop_region(vf, grid);
    let expected = vf.expected_next.as_ref().expect("non-terminal stage");
    let rho = model.rho_first();
    let c = vf.cost;
    let mut worst: f64 = 0.0;
    for id in 0..grid.len() {
        let on_boundary = grid
            .neighbors(id)
            .iter()
            .any(|&nb| region.stop[nb] != region.stop[id]);
        if !on_boundary {
            continue;
        }
        let p1 = grid.node(id)[0];
        let dev = (expected[id] - (1.0 - rho) * p1).abs() / (c + rho);
        if dev > worst {
            worst = dev;
        }
    }
    worst
}

/// Stop-boundary deviations for a family of models (typically ρ shrinking
/// toward 0 with the propagation parameters fixed).
#[derive(Debug, Clone)]
pub struct LimitReport {
    pub deviations: Vec<f64>,
    pub strictly_decreasing: bool,
}

/// Solves the DP for each model and measures how the stop boundary
/// approaches the limiting threshold level set.
pub fn limiting_threshold_check(
    models: &[ChangeModel],
    obs: &GaussianShiftModel,
    cost: f64,
    step: f64,
    horizon: usize,
) -> Result<LimitReport, DpError> {
    let mut deviations = Vec::with_capacity(models.len());
    for model in models {
        let grid = SimplexGrid::new(model.sensors(), step)?;
        let stages = value_iterate(model, obs, cost, &grid, horizon)?;
        let deepest = stages.last().expect("horizon >= 1");
        deviations.push(stop_boundary_deviation(deepest, &grid, model));
    }
    let strictly_decreasing = deviations.windows(2).all(|w| w[1] < w[0]);
    Ok(LimitReport {
        deviations,
        strictly_decreasing,
    })
}
