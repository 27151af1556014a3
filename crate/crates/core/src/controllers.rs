//! Feedback controllers for voltage regulation.
//!
//! All controllers are driven by voltage measurements: centralized
//! primal-dual gradient projection, the two-metric variant, the nested
//! distributed scheme with an inner non-Euclidean projection loop, the
//! truncated-sensitivity heuristic, and local volt-var droop.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::grid::{RadialNetwork, SensitivityMatrices};
use crate::power_flow::VoltageProfile;

/// Step sizes, regularization and limits shared by the optimizing controllers.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    /// Primal step size.
    pub alpha: f64,
    /// Dual step size.
    pub alpha_d: f64,
    /// Inner-loop step size; must stay below [`max_inner_step_size`].
    pub alpha_u: f64,
    /// Primal regularization.
    pub r_p: f64,
    /// Dual regularization.
    pub r_d: f64,
    /// Exploration parameter.
    pub epsilon: f64,
    /// Inner iterations per outer step.
    pub t_inner: usize,
    /// Lower voltage limit in pu.
    pub v_min: f64,
    /// Upper voltage limit in pu.
    pub v_max: f64,
    /// Optional fractional shrink of the reactive box, guarding against
    /// exploration excursions. 0 disables it.
    pub box_deflation: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            alpha_d: 10.0,
            alpha_u: 1.0,
            r_p: 1e-4,
            r_d: 1e-4,
            epsilon: 1e-4,
            t_inner: 4,
            v_min: 0.95,
            v_max: 1.05,
            box_deflation: 0.0,
        }
    }
}

impl ControllerConfig {
    /// Defaults with the step sizes tuned for the given network: the inner
    /// step just below its convergence bound, and the primal step capped at
    /// the interior stability bound `2 lambda_min(X) / max(c)` of the scaled
    /// gradient iteration, below which all controllers contract.
    pub fn tuned_for(net: &RadialNetwork, sens: &SensitivityMatrices) -> Self {
        let c_max = net.costs().iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
        let base = Self::default();
        Self {
            alpha: base.alpha.min(0.9 * 2.0 * sens.lambda_min_x() / c_max),
            alpha_u: 0.9 * max_inner_step_size(sens),
            v_min: net.v_min,
            v_max: net.v_max,
            ..base
        }
    }
}

/// Componentwise reactive power limits.
#[derive(Debug, Clone, PartialEq)]
pub struct SetpointBox {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl SetpointBox {
    pub fn from_network(net: &RadialNetwork) -> Self {
        let (lower, upper) = net.q_limits();
        Self { lower, upper }
    }

    pub fn n(&self) -> usize {
        self.lower.len()
    }

    /// Closed-interval componentwise clip; boundary values map to themselves.
    pub fn clip(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            v.len(),
            v.iter()
                .enumerate()
                .map(|(i, x)| x.max(self.lower[i]).min(self.upper[i])),
        )
    }

    pub fn contains(&self, v: &DVector<f64>) -> bool {
        v.iter()
            .enumerate()
            .all(|(i, x)| *x >= self.lower[i] && *x <= self.upper[i])
    }

    /// Largest componentwise distance of `v` outside the box, 0 if inside.
    pub fn excursion(&self, v: &DVector<f64>) -> f64 {
        v.iter()
            .enumerate()
            .map(|(i, x)| (self.lower[i] - x).max(x - self.upper[i]).max(0.0))
            .fold(0.0, f64::max)
    }

    /// Box shrunk on each side by `frac` of its half-width.
    pub fn deflated(&self, frac: f64) -> Self {
        let margin = (&self.upper - &self.lower).map(|w| 0.5 * frac * w);
        Self {
            lower: &self.lower + &margin,
            upper: &self.upper - &margin,
        }
    }
}

/// Voltage-limit multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    /// Upper-limit multipliers, componentwise nonnegative.
    pub lambda: DVector<f64>,
    /// Lower-limit multipliers, componentwise nonnegative.
    pub mu: DVector<f64>,
}

impl DualState {
    pub fn zeros(n: usize) -> Self {
        Self {
            lambda: DVector::zeros(n),
            mu: DVector::zeros(n),
        }
    }
}

/// Outer-iteration controller state.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterState {
    /// Currently implemented setpoints.
    pub q: DVector<f64>,
    pub duals: DualState,
    pub iteration: usize,
}

impl OuterState {
    pub fn new(n: usize) -> Self {
        Self {
            q: DVector::zeros(n),
            duals: DualState::zeros(n),
            iteration: 0,
        }
    }
}

/// Inner projection-loop state.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerState {
    pub u: DVector<f64>,
    /// Estimated voltage at the tentative setpoints.
    pub v_target: DVector<f64>,
    pub tau: usize,
}

/// Piecewise-linear volt-var curve with a deadband.
///
/// Outputs the upper reactive limit below `v1`, decays linearly to zero on
/// `[v1, v2]`, stays zero on the deadband `[v2, v3]`, decays linearly to the
/// lower limit on `[v3, v4]` and saturates there above `v4`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DroopCurve {
    pub v1: f64,
    pub v2: f64,
    pub v3: f64,
    pub v4: f64,
}

impl Default for DroopCurve {
    fn default() -> Self {
        Self {
            v1: 0.95,
            v2: 0.98,
            v3: 1.02,
            v4: 1.05,
        }
    }
}

impl DroopCurve {
    pub fn is_valid(&self) -> bool {
        self.v1 <= self.v2 && self.v2 <= self.v3 && self.v3 <= self.v4
    }
}

/// Sparse per-row representation of `X^{-1} C` restricted to the adjacency
/// pattern, entries in ascending column order.
///
/// This is the only network information the distributed controllers use, one
/// row per bus.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseScaling {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseScaling {
    pub fn new(sens: &SensitivityMatrices, costs: &DVector<f64>) -> Self {
        let n = sens.n();
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = Vec::new();
            for j in 0..n {
                if sens.is_adjacent(i, j) {
                    row.push((j, sens.x_inv[(i, j)] * costs[j]));
                }
            }
            rows.push(row);
        }
        Self { rows }
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    /// `[X^{-1} C q]_i` using only the stored adjacency entries, summed in
    /// ascending column order. The per-agent implementation reproduces this
    /// order exactly.
    pub fn apply(&self, q: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows
                .iter()
                .map(|row| row.iter().map(|(j, w)| w * q[*j]).sum::<f64>()),
        )
    }
}

/// Projected dual ascent step; both multiplier families advance
/// simultaneously from the pre-update state.
pub fn dual_update(duals: &DualState, v_meas: &VoltageProfile, cfg: &ControllerConfig) -> DualState {
    let n = duals.lambda.len();
    let mut lambda = DVector::zeros(n);
    let mut mu = DVector::zeros(n);
    for i in 0..n {
        lambda[i] = (duals.lambda[i]
            + cfg.alpha_d * (v_meas.v[i] - cfg.v_max - cfg.r_d * duals.lambda[i]))
            .max(0.0);
        mu[i] = (duals.mu[i] + cfg.alpha_d * (cfg.v_min - v_meas.v[i] - cfg.r_d * duals.mu[i]))
            .max(0.0);
    }
    DualState { lambda, mu }
}

/// Centralized primal descent step with Euclidean box projection; requires
/// the dense sensitivity matrix (gather-and-broadcast architecture).
pub fn centralized_primal_update(
    q: &DVector<f64>,
    duals: &DualState,
    sens: &SensitivityMatrices,
    costs: &DVector<f64>,
    cfg: &ControllerConfig,
    bounds: &SetpointBox,
) -> Result<DVector<f64>> {
    let n = sens.n();
    if q.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: q.len(),
        });
    }
    let coupling = &sens.x * (&duals.lambda - &duals.mu + cfg.r_p * q);
    let step = DVector::from_iterator(
        n,
        (0..n).map(|i| q[i] - cfg.alpha * (costs[i] * q[i] + coupling[i])),
    );
    Ok(bounds.clip(&step))
}

/// Two-metric step: gradient scaled by the sparse `X^{-1} C`, Euclidean
/// projection. Neighbor-only by the sparsity pattern, but not a descent
/// iteration at constrained points.
pub fn two_metric_update(
    q: &DVector<f64>,
    duals: &DualState,
    scaling: &SparseScaling,
    cfg: &ControllerConfig,
    bounds: &SetpointBox,
) -> Result<DVector<f64>> {
    Ok(bounds.clip(&tentative_setpoints(q, duals, scaling, cfg)?))
}

/// Unprojected scaled step: the tentative, possibly infeasible setpoints the
/// nested controller projects in its inner loop.
pub fn tentative_setpoints(
    q: &DVector<f64>,
    duals: &DualState,
    scaling: &SparseScaling,
    cfg: &ControllerConfig,
) -> Result<DVector<f64>> {
    let n = scaling.n();
    if q.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: q.len(),
        });
    }
    let scaled = scaling.apply(q);
    Ok(DVector::from_iterator(
        n,
        (0..n).map(|i| {
            q[i] - cfg.alpha * (scaled[i] + duals.lambda[i] - duals.mu[i] + cfg.r_p * q[i])
        }),
    ))
}

/// Reference solver for the box projection in the `X`-norm:
/// `argmin_{u in box} 0.5 (u - q_dot)' X (u - q_dot)`.
///
/// Uses the exact dense matrix and global information; this is the oracle the
/// distributed inner loop is tested against, not a deployable controller.
pub fn x_norm_projection_oracle(
    q_dot: &DVector<f64>,
    sens: &SensitivityMatrices,
    bounds: &SetpointBox,
) -> Result<DVector<f64>> {
    let step = 1.0 / sens.lambda_max_x();
    let max_iter = 1_000_000;
    let mut u = bounds.clip(q_dot);
    let mut last_step = f64::INFINITY;
    for _ in 0..max_iter {
        let grad = &sens.x * (&u - q_dot);
        let next = bounds.clip(&(&u - step * grad));
        last_step = (&next - &u).amax();
        u = next;
        if last_step <= 1e-13 {
            return Ok(u);
        }
    }
    Err(Error::ProjectionStalled {
        max_iter,
        step: last_step,
    })
}

/// Outcome of the exploration step.
#[derive(Debug, Clone, PartialEq)]
pub struct Exploration {
    /// The small excursion setpoint actually implemented.
    pub q_eps: DVector<f64>,
    /// Extrapolated voltage estimate at the tentative setpoints.
    pub v_estimate: DVector<f64>,
}

/// Implements `q + epsilon (q_dot - q)` on the plant and extrapolates the
/// measured voltage change to estimate the voltage at `q_dot`.
pub fn exploration_and_estimate<P>(
    q: &DVector<f64>,
    q_dot: &DVector<f64>,
    v_k: &VoltageProfile,
    plant: &mut P,
    cfg: &ControllerConfig,
) -> Result<Exploration>
where
    P: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let q_eps = DVector::from_iterator(
        q.len(),
        (0..q.len()).map(|i| q[i] + cfg.epsilon * (q_dot[i] - q[i])),
    );
    let v_eps = plant(&q_eps)?;
    let v_estimate = DVector::from_iterator(
        q.len(),
        (0..q.len()).map(|i| v_k.v[i] + (v_eps[i] - v_k.v[i]) / cfg.epsilon),
    );
    Ok(Exploration { q_eps, v_estimate })
}

/// One inner projection step: purely local, each bus uses only its own
/// measured voltage, its voltage target and its own box.
pub fn inner_projection_step(
    inner: &InnerState,
    v_meas_at_u: &VoltageProfile,
    cfg: &ControllerConfig,
    bounds: &SetpointBox,
) -> InnerState {
    let n = inner.u.len();
    let u = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let step = inner.u[i] - cfg.alpha_u * (v_meas_at_u.v[i] - inner.v_target[i]);
            step.max(bounds.lower[i]).min(bounds.upper[i])
        }),
    );
    InnerState {
        u,
        v_target: inner.v_target.clone(),
        tau: inner.tau + 1,
    }
}

/// Diagnostics recorded by one nested outer iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NestedStepDiag {
    /// `max_i |q_dot_i - q_i|`, the scale of the exploration excursion bound.
    pub tentative_gap: f64,
    /// Largest distance any implemented setpoint lay outside the box.
    pub excursion: f64,
}

/// Executes one full outer iteration of the nested algorithm against the
/// plant: measure, dual ascent, tentative setpoints from neighbor data,
/// exploration, then `t_inner` local projection steps starting from the
/// current setpoints. A plant fault aborts the step and leaves no partial
/// state behind.
pub fn nested_step<P>(
    state: &OuterState,
    plant: &mut P,
    scaling: &SparseScaling,
    cfg: &ControllerConfig,
    bounds: &SetpointBox,
) -> Result<(OuterState, NestedStepDiag)>
where
    P: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let bounds = if cfg.box_deflation > 0.0 {
        bounds.deflated(cfg.box_deflation)
    } else {
        bounds.clone()
    };
    let v_k = VoltageProfile {
        v: plant(&state.q)?,
    };
    let duals = dual_update(&state.duals, &v_k, cfg);
    let q_dot = tentative_setpoints(&state.q, &duals, scaling, cfg)?;
    let exploration = exploration_and_estimate(&state.q, &q_dot, &v_k, plant, cfg)?;

    let mut diag = NestedStepDiag {
        tentative_gap: (&q_dot - &state.q).amax(),
        excursion: bounds.excursion(&exploration.q_eps),
    };

    let mut inner = InnerState {
        u: state.q.clone(),
        v_target: exploration.v_estimate,
        tau: 0,
    };
    for _ in 0..cfg.t_inner {
        let v_u = VoltageProfile {
            v: plant(&inner.u)?,
        };
        inner = inner_projection_step(&inner, &v_u, cfg, &bounds);
    }
    diag.excursion = diag.excursion.max(bounds.excursion(&inner.u));

    Ok((
        OuterState {
            q: inner.u,
            duals,
            iteration: state.iteration + 1,
        },
        diag,
    ))
}

/// Heuristic step: the centralized update with the sensitivity matrix
/// truncated to local and neighboring entries.
pub fn truncated_sensitivity_update(
    q: &DVector<f64>,
    duals: &DualState,
    sens: &SensitivityMatrices,
    costs: &DVector<f64>,
    cfg: &ControllerConfig,
    bounds: &SetpointBox,
) -> Result<DVector<f64>> {
    let n = sens.n();
    if q.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: q.len(),
        });
    }
    let w = &duals.lambda - &duals.mu + cfg.r_p * q;
    let step = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let coupling: f64 = (0..n)
                .filter(|&j| sens.is_adjacent(i, j))
                .map(|j| sens.x[(i, j)] * w[j])
                .sum();
            q[i] - cfg.alpha * (costs[i] * q[i] + coupling)
        }),
    );
    Ok(bounds.clip(&step))
}

/// Evaluates the droop curve at a local voltage, clipped to the local box.
pub fn droop_update(curve: &DroopCurve, v_local: f64, q_min: f64, q_max: f64) -> f64 {
    let q = if v_local <= curve.v1 {
        q_max
    } else if v_local < curve.v2 {
        q_max * (curve.v2 - v_local) / (curve.v2 - curve.v1)
    } else if v_local <= curve.v3 {
        0.0
    } else if v_local < curve.v4 {
        q_min * (v_local - curve.v3) / (curve.v4 - curve.v3)
    } else {
        q_min
    };
    q.max(q_min).min(q_max)
}

/// The inner-loop step size bound `2 / lambda_max(X)`; the inner iteration
/// converges on the linear plant for any positive step below it.
pub fn max_inner_step_size(sens: &SensitivityMatrices) -> f64 {
    2.0 / sens.lambda_max_x()
}
