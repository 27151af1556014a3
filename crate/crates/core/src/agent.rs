//! Per-bus agent execution of the nested controller.
//!
//! Agents exchange messages only along electrical adjacency, in synchronous
//! super-steps, which makes the neighbor-only communication claim structurally
//! checkable: every message is logged and validated against the communication
//! graph. The agent system is a refactoring of the monolithic nested
//! controller; identical inputs produce bitwise-identical setpoint
//! trajectories.

use std::collections::BTreeMap;

use nalgebra::DVector;

use crate::controllers::{ControllerConfig, SetpointBox, SparseScaling};
use crate::error::{Error, Result};
use crate::grid::{BusId, RadialNetwork};
use crate::power_flow::VoltageProfile;

/// Undirected communication graph equal to electrical adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct CommGraph {
    pub neighbors: BTreeMap<BusId, Vec<BusId>>,
}

impl CommGraph {
    pub fn are_neighbors(&self, a: BusId, b: BusId) -> bool {
        self.neighbors
            .get(&a)
            .map(|list| list.binary_search(&b).is_ok())
            .unwrap_or(false)
    }
}

/// One logged scalar exchanged between adjacent buses.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub from: BusId,
    pub to: BusId,
    pub round: usize,
    pub name: &'static str,
    pub value: f64,
}

/// Builds the communication graph from cable adjacency.
pub fn build_comm_graph(net: &RadialNetwork) -> CommGraph {
    let mut neighbors: BTreeMap<BusId, Vec<BusId>> = BTreeMap::new();
    for b in &net.buses {
        neighbors.entry(*b).or_default();
    }
    for c in &net.cables {
        neighbors.entry(c.from).or_default().push(c.to);
        neighbors.entry(c.to).or_default().push(c.from);
    }
    for list in neighbors.values_mut() {
        list.sort_unstable();
        list.dedup();
    }
    CommGraph { neighbors }
}

/// Pass iff every logged message traverses an edge of the graph; returns the
/// offending messages otherwise.
pub fn assert_locality(log: &[Message], graph: &CommGraph) -> std::result::Result<(), Vec<Message>> {
    let offenders: Vec<Message> = log
        .iter()
        .filter(|m| !graph.are_neighbors(m.from, m.to))
        .cloned()
        .collect();
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(offenders)
    }
}

/// Execution phase of a synchronous super-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Measure at the committed setpoints, advance duals, communicate
    /// setpoints and form the tentative step.
    Outer,
    /// Implement the epsilon excursion and build the voltage target.
    Exploration,
    /// Purely local projection iteration `tau`.
    Inner(usize),
}

/// Local state of one bus agent. Holds only its own scalars and the row of
/// `X^{-1} C` restricted to itself and its electrical neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub bus: BusId,
    pub q: f64,
    pub lambda: f64,
    pub mu: f64,
    pub v_k: f64,
    pub q_dot: f64,
    pub q_eps: f64,
    pub u: f64,
    pub v_target: f64,
    pub q_lower: f64,
    pub q_upper: f64,
    pub cost: f64,
    /// `(bus id, X^{-1}[i][j] * c_j)` for self and neighbors, ascending.
    pub scaling_row: Vec<(usize, f64)>,
    mailbox: BTreeMap<usize, f64>,
}

/// Synchronous multi-agent executor of the nested controller.
#[derive(Debug, Clone)]
pub struct AgentSystem {
    pub agents: Vec<AgentState>,
    pub graph: CommGraph,
    cfg: ControllerConfig,
    phase: Phase,
    round: usize,
    iteration: usize,
    /// `max_i |q_dot_i - q_i|` of the current outer iteration.
    last_gap: f64,
    log: Vec<Message>,
}

impl AgentSystem {
    /// Provisions one agent per controllable bus with its sparse scaling row,
    /// modeling the commissioning step performed by the operator.
    pub fn new(
        net: &RadialNetwork,
        scaling: &SparseScaling,
        bounds: &SetpointBox,
        cfg: ControllerConfig,
    ) -> Self {
        let graph = build_comm_graph(net);
        let bounds = if cfg.box_deflation > 0.0 {
            bounds.deflated(cfg.box_deflation)
        } else {
            bounds.clone()
        };
        let costs = net.costs();
        let mut agents = Vec::with_capacity(net.n());
        for i in 0..net.n() {
            let bus = BusId(i + 1);
            agents.push(AgentState {
                bus,
                q: 0.0,
                lambda: 0.0,
                mu: 0.0,
                v_k: 0.0,
                q_dot: 0.0,
                q_eps: 0.0,
                u: 0.0,
                v_target: 0.0,
                q_lower: bounds.lower[i],
                q_upper: bounds.upper[i],
                cost: costs[i],
                scaling_row: scaling.rows[i].iter().map(|(j, w)| (*j + 1, *w)).collect(),
                mailbox: BTreeMap::new(),
            });
        }
        Self {
            agents,
            graph,
            cfg,
            phase: Phase::Outer,
            round: 0,
            iteration: 0,
            last_gap: 0.0,
            log: Vec::new(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn message_log(&self) -> &[Message] {
        &self.log
    }

    /// Largest box excursion the exploration step of the current outer
    /// iteration is allowed to cause: `epsilon * max_i |q_dot_i - q_i|`.
    pub fn excursion_allowance(&self) -> f64 {
        self.cfg.epsilon * self.last_gap
    }

    /// Committed outer setpoints.
    pub fn q(&self) -> DVector<f64> {
        DVector::from_iterator(self.agents.len(), self.agents.iter().map(|a| a.q))
    }

    pub fn lambda(&self) -> DVector<f64> {
        DVector::from_iterator(self.agents.len(), self.agents.iter().map(|a| a.lambda))
    }

    pub fn mu(&self) -> DVector<f64> {
        DVector::from_iterator(self.agents.len(), self.agents.iter().map(|a| a.mu))
    }

    /// The setpoint vector to implement at the current phase.
    pub fn setpoint(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.agents.len(),
            self.agents.iter().map(|a| match self.phase {
                Phase::Outer => a.q,
                Phase::Exploration => a.q_eps,
                Phase::Inner(_) => a.u,
            }),
        )
    }

    /// One synchronous super-step: deliver mailboxes, apply the phase update
    /// on every agent, emit messages for the next barrier.
    ///
    /// Any message addressed to a non-neighbor is a hard fault.
    pub fn run_round(&mut self, v_meas: &VoltageProfile) -> Result<()> {
        let cfg = self.cfg.clone();
        match self.phase {
            Phase::Outer => {
                // Message production: every agent posts its setpoint to each
                // controllable neighbor.
                let mut outgoing: Vec<Message> = Vec::new();
                for a in &self.agents {
                    for nb in &self.graph.neighbors[&a.bus] {
                        if nb.0 == 0 {
                            continue; // the substation holds no controller
                        }
                        outgoing.push(Message {
                            from: a.bus,
                            to: *nb,
                            round: self.round,
                            name: "q",
                            value: a.q,
                        });
                    }
                }
                // Delivery barrier.
                for m in &outgoing {
                    if !self.graph.are_neighbors(m.from, m.to) {
                        return Err(Error::LocalityViolation {
                            from: m.from,
                            to: m.to,
                            round: m.round,
                        });
                    }
                    self.agents[m.to.0 - 1].mailbox.insert(m.from.0, m.value);
                }
                self.log.extend(outgoing);

                for (i, a) in self.agents.iter_mut().enumerate() {
                    let v = v_meas.v[i];
                    a.v_k = v;
                    a.lambda =
                        (a.lambda + cfg.alpha_d * (v - cfg.v_max - cfg.r_d * a.lambda)).max(0.0);
                    a.mu = (a.mu + cfg.alpha_d * (cfg.v_min - v - cfg.r_d * a.mu)).max(0.0);
                    let mut scaled = 0.0;
                    for (bus, w) in &a.scaling_row {
                        let q_j = if *bus == a.bus.0 {
                            a.q
                        } else {
                            *a.mailbox.get(bus).expect("neighbor setpoint delivered")
                        };
                        scaled += w * q_j;
                    }
                    a.q_dot = a.q - cfg.alpha * (scaled + a.lambda - a.mu + cfg.r_p * a.q);
                    a.q_eps = a.q + cfg.epsilon * (a.q_dot - a.q);
                    a.mailbox.clear();
                }
                self.last_gap = self
                    .agents
                    .iter()
                    .map(|a| (a.q_dot - a.q).abs())
                    .fold(0.0, f64::max);
                self.phase = Phase::Exploration;
            }
            Phase::Exploration => {
                for (i, a) in self.agents.iter_mut().enumerate() {
                    let v = v_meas.v[i];
                    a.v_target = a.v_k + (v - a.v_k) / cfg.epsilon;
                    a.u = a.q;
                }
                self.phase = Phase::Inner(0);
            }
            Phase::Inner(tau) => {
                for (i, a) in self.agents.iter_mut().enumerate() {
                    let v = v_meas.v[i];
                    let step = a.u - cfg.alpha_u * (v - a.v_target);
                    a.u = step.max(a.q_lower).min(a.q_upper);
                }
                if tau + 1 >= cfg.t_inner {
                    for a in &mut self.agents {
                        a.q = a.u;
                    }
                    self.iteration += 1;
                    self.phase = Phase::Outer;
                } else {
                    self.phase = Phase::Inner(tau + 1);
                }
            }
        }
        self.round += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controllers::{
        nested_step, ControllerConfig, OuterState, SetpointBox, SparseScaling,
    };
    use crate::grid::{build_sensitivities, generate_synthetic_feeder, test_chain, Branching};
    use crate::power_flow::{solve_ac, PowerInjection};

    #[test]
    fn chain_adjacency() {
        let net = test_chain(&[(0.01, 0.01), (0.01, 0.01)]);
        let g = build_comm_graph(&net);
        assert_eq!(g.neighbors[&BusId(1)], vec![BusId(0), BusId(2)]);
        let ctrl: Vec<BusId> = g.neighbors[&BusId(1)]
            .iter()
            .filter(|b| b.0 != 0)
            .cloned()
            .collect();
        assert_eq!(ctrl, vec![BusId(2)]);
    }

    #[test]
    fn star_adjacency() {
        let mut net = test_chain(&[(0.01, 0.01), (0.01, 0.01)]);
        net.buses.push(BusId(3));
        net.cables.push(crate::grid::Cable {
            from: BusId(1),
            to: BusId(3),
            resistance: 0.01,
            reactance: 0.01,
        });
        let g = build_comm_graph(&net);
        assert_eq!(g.neighbors[&BusId(1)], vec![BusId(0), BusId(2), BusId(3)]);
    }

    #[test]
    fn graph_is_symmetric_on_random_trees() {
        for seed in 0..20 {
            let net = generate_synthetic_feeder(seed, 17, Branching::Random).unwrap();
            let g = build_comm_graph(&net);
            for (a, list) in &g.neighbors {
                for b in list {
                    assert!(g.are_neighbors(*b, *a));
                }
            }
        }
    }

    #[test]
    fn locality_flags_injected_cross_feeder_message() {
        let net = test_chain(&[(0.01, 0.01), (0.01, 0.01), (0.01, 0.01)]);
        let g = build_comm_graph(&net);
        let bogus = Message {
            from: BusId(1),
            to: BusId(3),
            round: 0,
            name: "q",
            value: 0.1,
        };
        let result = assert_locality(&[bogus.clone()], &g);
        assert_eq!(result.unwrap_err(), vec![bogus]);
    }

    #[test]
    fn broadcast_pattern_fails_locality() {
        // A gather-and-broadcast architecture needs messages between every
        // pair of buses, which the neighbor graph rejects on any chain.
        let net = test_chain(&[(0.01, 0.01), (0.01, 0.01), (0.01, 0.01)]);
        let g = build_comm_graph(&net);
        let mut log = Vec::new();
        for i in 1..=3usize {
            for j in 1..=3usize {
                if i != j {
                    log.push(Message {
                        from: BusId(i),
                        to: BusId(j),
                        round: 0,
                        name: "lambda",
                        value: 0.0,
                    });
                }
            }
        }
        assert!(assert_locality(&log, &g).is_err());
    }

    fn run_instants(
        sys: &mut AgentSystem,
        net: &RadialNetwork,
        p: &DVector<f64>,
        instants: usize,
    ) -> Vec<DVector<f64>> {
        let n = net.n();
        let mut trace = Vec::new();
        for _ in 0..instants {
            let q = sys.setpoint();
            let inj = PowerInjection {
                p: p.clone(),
                q: q.clone(),
            };
            let sol = solve_ac(net, &inj, 1e-10, 200).unwrap();
            sys.run_round(&sol.voltages).unwrap();
            trace.push(q);
        }
        assert_eq!(n, sys.agents.len());
        trace
    }

    #[test]
    fn agent_system_matches_monolithic_bitwise() {
        let net = generate_synthetic_feeder(3, 8, Branching::ChainHeavy).unwrap();
        let sens = build_sensitivities(&net).unwrap();
        let scaling = SparseScaling::new(&sens, &net.costs());
        let bounds = SetpointBox::from_network(&net);
        let cfg = ControllerConfig::tuned_for(&net, &sens);
        let p = net.pv_capacity();

        // Agent-based trajectory.
        let mut sys = AgentSystem::new(&net, &scaling, &bounds, cfg.clone());
        let outer_iters = 5;
        let instants = outer_iters * (2 + cfg.t_inner);
        let agent_trace = run_instants(&mut sys, &net, &p, instants);

        // Monolithic trajectory, recording every implemented setpoint.
        let mut mono_trace: Vec<DVector<f64>> = Vec::new();
        let mut plant = |q: &DVector<f64>| -> crate::error::Result<DVector<f64>> {
            mono_trace.push(q.clone());
            let inj = PowerInjection {
                p: p.clone(),
                q: q.clone(),
            };
            Ok(solve_ac(&net, &inj, 1e-10, 200)?.voltages.v)
        };
        let mut state = OuterState::new(net.n());
        for _ in 0..outer_iters {
            let (next, _) = nested_step(&state, &mut plant, &scaling, &cfg, &bounds).unwrap();
            state = next;
        }

        assert_eq!(agent_trace.len(), mono_trace.len());
        for (a, m) in agent_trace.iter().zip(mono_trace.iter()) {
            assert_eq!(a, m, "setpoint trajectories must be bitwise identical");
        }
        assert_eq!(state.q, sys.q());
        assert_eq!(state.duals.lambda, sys.lambda());
        assert_eq!(state.duals.mu, sys.mu());
    }

    #[test]
    fn message_accounting_per_phase() {
        let net = test_chain(&[(0.01, 0.02), (0.01, 0.02), (0.01, 0.02), (0.01, 0.02)]);
        let sens = build_sensitivities(&net).unwrap();
        let scaling = SparseScaling::new(&sens, &net.costs());
        let bounds = SetpointBox::from_network(&net);
        let cfg = ControllerConfig::tuned_for(&net, &sens);
        let t_inner = cfg.t_inner;
        let mut sys = AgentSystem::new(&net, &scaling, &bounds, cfg);
        let p = DVector::zeros(net.n());

        run_instants(&mut sys, &net, &p, 1);
        // 4 controllable buses on a chain: 3 undirected edges, 6 directed.
        assert_eq!(sys.message_log().len(), 6);
        run_instants(&mut sys, &net, &p, 1 + t_inner);
        // Exploration and inner rounds exchange nothing.
        assert_eq!(sys.message_log().len(), 6);
        assert!(assert_locality(sys.message_log(), &sys.graph).is_ok());
    }

    #[test]
    fn identical_inputs_identical_log() {
        let net = generate_synthetic_feeder(5, 9, Branching::Random).unwrap();
        let sens = build_sensitivities(&net).unwrap();
        let scaling = SparseScaling::new(&sens, &net.costs());
        let bounds = SetpointBox::from_network(&net);
        let cfg = ControllerConfig::tuned_for(&net, &sens);
        let p = net.pv_capacity();
        let mut a = AgentSystem::new(&net, &scaling, &bounds, cfg.clone());
        let mut b = AgentSystem::new(&net, &scaling, &bounds, cfg);
        run_instants(&mut a, &net, &p, 12);
        run_instants(&mut b, &net, &p, 12);
        assert_eq!(a.message_log(), b.message_log());
    }
}
