//! Shared test fixtures: an independent QP reference solver and hand-built
//! networks.

use std::collections::BTreeMap;

use nalgebra::DVector;
use voltlab_core::{
    solve_ac, BusId, Cable, DerSpec, PowerInjection, RadialNetwork, SensitivityMatrices,
    SetpointBox,
};

/// Uniform chain feeder with DERs on every bus; impedances in pu.
pub fn chain_feeder(n: usize, r: f64, x: f64, q_cap: f64, v_max: f64) -> RadialNetwork {
    let buses = (0..=n).map(BusId).collect();
    let cables = (0..n)
        .map(|i| Cable {
            from: BusId(i),
            to: BusId(i + 1),
            resistance: r,
            reactance: x,
        })
        .collect();
    let mut ders = BTreeMap::new();
    for i in 1..=n {
        ders.insert(
            BusId(i),
            DerSpec {
                bus: BusId(i),
                q_min: -q_cap,
                q_max: q_cap,
                cost: 1.0,
            },
        );
    }
    RadialNetwork {
        buses,
        cables,
        ders,
        v0: 1.0,
        v_min: 0.95,
        v_max,
        s_base: 400.0,
        v_base: 0.4,
    }
}

/// Reference solver for the reactive dispatch problem
/// `min 0.5 q' C q  s.t.  v_lo <= v(q) <= v_hi,  q in box`
/// by projected dual gradient ascent with exact separable primal
/// minimization. The voltage map is the AC plant, handled by re-anchoring
/// the linear model `v = offset + X q` at the current solution until the
/// anchor is self-consistent.
///
/// Independent of the feedback controllers: no primal gradient steps, no
/// regularization, exact primal argmin per dual iterate.
pub fn qp_reference(
    net: &RadialNetwork,
    sens: &SensitivityMatrices,
    p_gen: &DVector<f64>,
    p_demand: &DVector<f64>,
    q_demand: &DVector<f64>,
) -> DVector<f64> {
    let n = net.n();
    let bounds = SetpointBox::from_network(net);
    let costs = net.costs();
    let c_min = costs.iter().cloned().fold(f64::MAX, f64::min);
    let lmax = sens.lambda_max_x();
    let step_d = 0.5 * c_min / (lmax * lmax);

    let v_ac = |q: &DVector<f64>| -> DVector<f64> {
        let inj = PowerInjection::net(q, p_gen, p_demand, q_demand);
        solve_ac(net, &inj, 1e-12, 500).expect("reference plant solve").voltages.v
    };

    let mut q = DVector::zeros(n);
    let mut lambda = DVector::<f64>::zeros(n);
    let mut mu = DVector::<f64>::zeros(n);
    for _anchor in 0..60 {
        // Anchor the linear model at the current setpoints.
        let offset = v_ac(&q) - &sens.x * &q;
        let mut last = q.clone();
        for _ in 0..2_000_000usize {
            let grad = &sens.x * (&lambda - &mu);
            let q_opt = DVector::from_iterator(
                n,
                (0..n).map(|i| (-grad[i] / costs[i]).max(bounds.lower[i]).min(bounds.upper[i])),
            );
            let v = &offset + &sens.x * &q_opt;
            let mut moved = 0.0f64;
            for i in 0..n {
                let nl = (lambda[i] + step_d * (v[i] - net.v_max)).max(0.0);
                let nm = (mu[i] + step_d * (net.v_min - v[i])).max(0.0);
                moved = moved.max((nl - lambda[i]).abs()).max((nm - mu[i]).abs());
                lambda[i] = nl;
                mu[i] = nm;
            }
            last = q_opt;
            if moved <= 1e-13 {
                break;
            }
        }
        let shift = (&last - &q).amax();
        q = last;
        if shift <= 1e-10 {
            break;
        }
    }
    q
}
