//! The physical plant: exact AC power flow for radial feeders via the
//! backward/forward sweep, the linearized voltage model, and noisy voltage
//! measurement.

use nalgebra::{Complex, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{RadialNetwork, SensitivityMatrices};

/// Default power mismatch tolerance in pu.
pub const DEFAULT_PF_TOL: f64 = 1e-8;
/// Default sweep iteration cap.
pub const DEFAULT_PF_MAX_ITER: usize = 100;

/// Net per-bus injections in pu (DER output minus demand), slack excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerInjection {
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

impl PowerInjection {
    pub fn zeros(n: usize) -> Self {
        Self {
            p: DVector::zeros(n),
            q: DVector::zeros(n),
        }
    }

    /// Net injection from DER outputs and demands.
    pub fn net(
        q_ctrl: &DVector<f64>,
        p_gen: &DVector<f64>,
        p_demand: &DVector<f64>,
        q_demand: &DVector<f64>,
    ) -> Self {
        Self {
            p: p_gen - p_demand,
            q: q_ctrl - q_demand,
        }
    }
}

/// Voltage magnitudes at the non-slack buses, pu.
#[derive(Debug, Clone, PartialEq)]
pub struct VoltageProfile {
    pub v: DVector<f64>,
}

impl VoltageProfile {
    pub fn max(&self) -> f64 {
        self.v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.v.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Converged AC power flow result.
#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    pub voltages: VoltageProfile,
    pub iterations: usize,
    /// Final maximum per-bus power mismatch in pu.
    pub residual: f64,
    pub converged: bool,
}

/// Additive voltage measurement noise; `noise_std = 0` gives exact readings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementConfig {
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for MeasurementConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.0,
            seed: 0,
        }
    }
}

/// Solves the AC power flow for constant-power injections with the
/// backward/forward sweep.
///
/// Returns an error with an explicit diverged status if the residual does not
/// fall below `tol` within `max_iter` sweeps; callers treat that as a plant
/// fault.
pub fn solve_ac(
    net: &RadialNetwork,
    inj: &PowerInjection,
    tol: f64,
    max_iter: usize,
) -> Result<PowerFlowSolution> {
    let n = net.n();
    if inj.p.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: inj.p.len(),
        });
    }
    if inj.q.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: inj.q.len(),
        });
    }
    let parents = net.parents()?;
    // Reverse topological order: children before parents.
    let mut order: Vec<usize> = Vec::with_capacity(n);
    {
        let children = net.children();
        let mut stack = vec![0usize];
        let mut topo = Vec::with_capacity(n + 1);
        while let Some(u) = stack.pop() {
            topo.push(u);
            for &c in &children[u] {
                stack.push(c);
            }
        }
        order.extend(topo.into_iter().rev().filter(|&b| b != 0));
    }

    let s: Vec<Complex<f64>> = (0..n)
        .map(|i| Complex::new(inj.p[i], inj.q[i]))
        .collect();
    let z: Vec<Complex<f64>> = {
        let mut z = vec![Complex::new(0.0, 0.0); net.buses.len()];
        for c in &net.cables {
            z[c.to.0] = Complex::new(c.resistance, c.reactance);
        }
        z
    };

    let mut v = vec![Complex::new(net.v0, 0.0); net.buses.len()];
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let v_old = v.clone();
        // Backward: accumulate branch currents leaf to root.
        let mut branch_current = vec![Complex::new(0.0, 0.0); net.buses.len()];
        for &b in &order {
            let inj_current = (s[b - 1] / v[b]).conj();
            branch_current[b] -= inj_current;
            if let Some(p) = parents[b] {
                let flow = branch_current[b];
                branch_current[p] += flow;
            }
        }
        // Forward: update voltages root to leaf.
        let forward: Vec<usize> = order.iter().rev().cloned().collect();
        for &b in &forward {
            let p = parents[b].expect("non-slack bus has a parent");
            v[b] = v[p] - z[b] * branch_current[b];
        }
        residual = (0..n)
            .map(|i| {
                let b = i + 1;
                (s[i] * (v[b] / v_old[b] - Complex::new(1.0, 0.0))).norm()
            })
            .fold(0.0f64, f64::max);
        if !residual.is_finite() {
            return Err(Error::Diverged {
                residual,
                iterations: it,
            });
        }
        if residual <= tol {
            return Ok(PowerFlowSolution {
                voltages: VoltageProfile {
                    v: DVector::from_iterator(n, (1..=n).map(|b| v[b].norm())),
                },
                iterations: it,
                residual,
                converged: true,
            });
        }
    }
    Err(Error::Diverged {
        residual,
        iterations: max_iter,
    })
}

/// Evaluates the linearized voltage model
/// `v = v0*1 + R (p - p_d) + X (q - q_d)`.
pub fn linear_voltage(
    sens: &SensitivityMatrices,
    net: &RadialNetwork,
    q_ctrl: &DVector<f64>,
    p_gen: &DVector<f64>,
    p_demand: &DVector<f64>,
    q_demand: &DVector<f64>,
) -> Result<VoltageProfile> {
    let n = sens.n();
    for vec in [q_ctrl, p_gen, p_demand, q_demand] {
        if vec.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: vec.len(),
            });
        }
    }
    let v = DVector::from_element(n, net.v0) + &sens.r * (p_gen - p_demand)
        + &sens.x * (q_ctrl - q_demand);
    Ok(VoltageProfile { v })
}

/// Returns the solution voltages with seeded i.i.d. Gaussian noise added.
pub fn measure(sol: &PowerFlowSolution, cfg: &MeasurementConfig) -> VoltageProfile {
    if cfg.noise_std == 0.0 {
        return sol.voltages.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.noise_std).expect("noise_std >= 0");
    let v = sol.voltages.v.map(|x| x + normal.sample(&mut rng));
    VoltageProfile { v }
}
