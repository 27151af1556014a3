//! Radial network description and the voltage sensitivity matrices derived
//! from it.
//!
//! A feeder is a tree rooted at the substation bus 0. For every non-slack bus
//! the entries of the sensitivity matrices are path sums over the cables
//! shared between the root-to-bus paths, which makes both matrices symmetric
//! positive definite whenever all impedances are strictly positive. Their
//! inverses are sparse: an off-diagonal entry is nonzero only for electrically
//! adjacent buses.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Relative tolerance for declaring an entry of an inverse sensitivity matrix
/// zero when checking the adjacency sparsity pattern.
pub const SPARSITY_RTOL: f64 = 1e-9;

/// Tolerance on the inversion residual of the sensitivity matrices.
pub const INVERSION_RTOL: f64 = 1e-9;

/// Bus index; 0 is always the substation (slack) bus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BusId(pub usize);

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A distribution cable, oriented from the bus closer to the substation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cable {
    pub from: BusId,
    pub to: BusId,
    /// Resistance in pu; must be strictly positive.
    pub resistance: f64,
    /// Reactance in pu; must be strictly positive.
    pub reactance: f64,
}

/// Reactive power capability and cost of the DER at one bus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerSpec {
    pub bus: BusId,
    /// Lower reactive limit in pu, `q_min <= 0`.
    pub q_min: f64,
    /// Upper reactive limit in pu, `q_max >= 0`.
    pub q_max: f64,
    /// Strictly positive quadratic cost weight.
    pub cost: f64,
}

/// A balanced radial distribution network with per-unit bases.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialNetwork {
    pub buses: Vec<BusId>,
    pub cables: Vec<Cable>,
    pub ders: BTreeMap<BusId, DerSpec>,
    /// Substation voltage magnitude in pu.
    pub v0: f64,
    /// Lower voltage limit in pu.
    pub v_min: f64,
    /// Upper voltage limit in pu.
    pub v_max: f64,
    /// Power base in kVA.
    pub s_base: f64,
    /// Voltage base in kV.
    pub v_base: f64,
}

/// One diagnostic produced by [`validate_topology`].
#[derive(Debug, Clone, PartialEq)]
pub enum TopologyViolation {
    DuplicateBus(BusId),
    MissingSlack,
    WrongCableCount { buses: usize, cables: usize },
    UnknownEndpoint { cable: (BusId, BusId) },
    NonpositiveResistance { cable: (BusId, BusId) },
    NonpositiveReactance { cable: (BusId, BusId) },
    CycleDetected { closing_cable: (BusId, BusId) },
    Disconnected { bus: BusId },
    WrongOrientation { cable: (BusId, BusId) },
    MissingDer { bus: BusId },
    InfeasibleDerRange { bus: BusId },
    NonpositiveDerCost { bus: BusId },
    NonpositiveSlackVoltage,
    InvalidVoltageLimits,
    NonpositiveBase,
}

impl fmt::Display for TopologyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use TopologyViolation::*;
        match self {
            DuplicateBus(b) => write!(f, "duplicate bus id {b}"),
            MissingSlack => write!(f, "bus 0 (substation) missing"),
            WrongCableCount { buses, cables } => {
                write!(f, "{buses} buses require {} cables, found {cables}", buses - 1)
            }
            UnknownEndpoint { cable } => {
                write!(f, "cable ({},{}) references unknown bus", cable.0, cable.1)
            }
            NonpositiveResistance { cable } => {
                write!(f, "nonpositive resistance at ({},{})", cable.0, cable.1)
            }
            NonpositiveReactance { cable } => {
                write!(f, "nonpositive reactance at ({},{})", cable.0, cable.1)
            }
            CycleDetected { closing_cable } => {
                write!(f, "cycle detected, closed by cable ({},{})", closing_cable.0, closing_cable.1)
            }
            Disconnected { bus } => write!(f, "bus {bus} not connected to the substation"),
            WrongOrientation { cable } => write!(
                f,
                "cable ({},{}) oriented away from the substation",
                cable.0, cable.1
            ),
            MissingDer { bus } => write!(f, "bus {bus} has no DER specification"),
            InfeasibleDerRange { bus } => {
                write!(f, "DER at bus {bus} must satisfy q_min <= 0 <= q_max")
            }
            NonpositiveDerCost { bus } => write!(f, "DER at bus {bus} has nonpositive cost"),
            NonpositiveSlackVoltage => write!(f, "slack voltage must be positive"),
            InvalidVoltageLimits => write!(f, "voltage limits must satisfy 0 < v_min < v_max"),
            NonpositiveBase => write!(f, "power and voltage bases must be positive"),
        }
    }
}

impl RadialNetwork {
    /// Number of controllable (non-slack) buses.
    pub fn n(&self) -> usize {
        self.buses.len().saturating_sub(1)
    }

    /// Row/column index of a non-slack bus in the sensitivity matrices.
    pub fn matrix_index(&self, bus: BusId) -> Result<usize> {
        if bus.0 >= 1 && bus.0 <= self.n() {
            Ok(bus.0 - 1)
        } else {
            Err(Error::UnknownBus(bus))
        }
    }

    /// Parent bus of every bus, `None` for the slack. Index = bus id.
    pub fn parents(&self) -> Result<Vec<Option<usize>>> {
        let mut parents = vec![None; self.buses.len()];
        for c in &self.cables {
            if c.to.0 == 0 || c.to.0 >= self.buses.len() || c.from.0 >= self.buses.len() {
                return Err(Error::InvalidNetwork(format!(
                    "cable ({},{}) has invalid endpoints",
                    c.from, c.to
                )));
            }
            parents[c.to.0] = Some(c.from.0);
        }
        Ok(parents)
    }

    /// Children of every bus, index = bus id.
    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut children = vec![Vec::new(); self.buses.len()];
        for c in &self.cables {
            if c.from.0 < self.buses.len() {
                children[c.from.0].push(c.to.0);
            }
        }
        for list in &mut children {
            list.sort_unstable();
        }
        children
    }

    /// Componentwise reactive power limits `(lower, upper)` over non-slack buses.
    pub fn q_limits(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.n();
        let mut lo = DVector::zeros(n);
        let mut hi = DVector::zeros(n);
        for (bus, der) in &self.ders {
            if bus.0 >= 1 && bus.0 <= n {
                lo[bus.0 - 1] = der.q_min;
                hi[bus.0 - 1] = der.q_max;
            }
        }
        (lo, hi)
    }

    /// Cost weights `c_i` over non-slack buses, defaulting to 1.
    pub fn costs(&self) -> DVector<f64> {
        let n = self.n();
        let mut c = DVector::from_element(n, 1.0);
        for (bus, der) in &self.ders {
            if bus.0 >= 1 && bus.0 <= n {
                c[bus.0 - 1] = der.cost;
            }
        }
        c
    }

    /// Rated PV active power per non-slack bus, in pu.
    ///
    /// The synthetic feeder sizes the reactive range as half the PV rating, so
    /// the rating is recovered as `2 * q_max`.
    pub fn pv_capacity(&self) -> DVector<f64> {
        let n = self.n();
        let mut cap = DVector::zeros(n);
        for (bus, der) in &self.ders {
            if bus.0 >= 1 && bus.0 <= n {
                cap[bus.0 - 1] = 2.0 * der.q_max;
            }
        }
        cap
    }

    /// Impedance base in ohms.
    pub fn z_base(&self) -> f64 {
        1000.0 * self.v_base * self.v_base / self.s_base
    }
}

/// Checks every structural invariant of a [`RadialNetwork`] and returns one
/// entry per violation. An empty list means the network is a well-formed tree.
pub fn validate_topology(net: &RadialNetwork) -> Vec<TopologyViolation> {
    let mut out = Vec::new();

    let mut seen = std::collections::BTreeSet::new();
    for b in &net.buses {
        if !seen.insert(b.0) {
            out.push(TopologyViolation::DuplicateBus(*b));
        }
    }
    if !seen.contains(&0) {
        out.push(TopologyViolation::MissingSlack);
    }
    if net.cables.len() + 1 != net.buses.len() {
        out.push(TopologyViolation::WrongCableCount {
            buses: net.buses.len(),
            cables: net.cables.len(),
        });
    }

    for c in &net.cables {
        let ends = (c.from, c.to);
        if !seen.contains(&c.from.0) || !seen.contains(&c.to.0) {
            out.push(TopologyViolation::UnknownEndpoint { cable: ends });
        }
        if c.resistance <= 0.0 {
            out.push(TopologyViolation::NonpositiveResistance { cable: ends });
        }
        if c.reactance <= 0.0 {
            out.push(TopologyViolation::NonpositiveReactance { cable: ends });
        }
    }

    // Undirected BFS from the substation: detects disconnection, cycles and
    // orientation errors in one pass.
    if seen.contains(&0) {
        let mut adj: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for (ci, c) in net.cables.iter().enumerate() {
            adj.entry(c.from.0).or_default().push((c.to.0, ci));
            adj.entry(c.to.0).or_default().push((c.from.0, ci));
        }
        let mut depth: BTreeMap<usize, usize> = BTreeMap::new();
        let mut via: BTreeMap<usize, usize> = BTreeMap::new();
        depth.insert(0, 0);
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            if let Some(edges) = adj.get(&u) {
                for &(v, ci) in edges {
                    if via.get(&u) == Some(&ci) {
                        continue; // edge we arrived through
                    }
                    if depth.contains_key(&v) {
                        let c = &net.cables[ci];
                        let viol = TopologyViolation::CycleDetected {
                            closing_cable: (c.from, c.to),
                        };
                        if !out.contains(&viol) {
                            out.push(viol);
                        }
                    } else {
                        depth.insert(v, depth[&u] + 1);
                        via.insert(v, ci);
                        queue.push_back(v);
                    }
                }
            }
        }
        for b in &seen {
            if !depth.contains_key(b) {
                out.push(TopologyViolation::Disconnected { bus: BusId(*b) });
            }
        }
        for c in &net.cables {
            if let (Some(df), Some(dt)) = (depth.get(&c.from.0), depth.get(&c.to.0)) {
                if df >= dt {
                    out.push(TopologyViolation::WrongOrientation {
                        cable: (c.from, c.to),
                    });
                }
            }
        }
    }

    for b in &seen {
        if *b == 0 {
            continue;
        }
        match net.ders.get(&BusId(*b)) {
            None => out.push(TopologyViolation::MissingDer { bus: BusId(*b) }),
            Some(d) => {
                if !(d.q_min <= 0.0 && 0.0 <= d.q_max) {
                    out.push(TopologyViolation::InfeasibleDerRange { bus: BusId(*b) });
                }
                if d.cost <= 0.0 {
                    out.push(TopologyViolation::NonpositiveDerCost { bus: BusId(*b) });
                }
            }
        }
    }

    if net.v0 <= 0.0 {
        out.push(TopologyViolation::NonpositiveSlackVoltage);
    }
    if !(net.v_min > 0.0 && net.v_min < net.v_max) {
        out.push(TopologyViolation::InvalidVoltageLimits);
    }
    if net.s_base <= 0.0 || net.v_base <= 0.0 {
        out.push(TopologyViolation::NonpositiveBase);
    }

    out
}

/// The ordered cable sequence on the unique path from the substation to `bus`.
pub fn path_cables(net: &RadialNetwork, bus: BusId) -> Result<Vec<Cable>> {
    if bus.0 == 0 || bus.0 >= net.buses.len() {
        return Err(Error::UnknownBus(bus));
    }
    let mut cable_to: BTreeMap<usize, &Cable> = BTreeMap::new();
    for c in &net.cables {
        cable_to.insert(c.to.0, c);
    }
    let mut rev = Vec::new();
    let mut cursor = bus.0;
    while cursor != 0 {
        let c = cable_to
            .get(&cursor)
            .ok_or(Error::UnknownBus(BusId(cursor)))?;
        rev.push(**c);
        cursor = c.from.0;
        if rev.len() > net.buses.len() {
            return Err(Error::InvalidNetwork("cycle on path to substation".into()));
        }
    }
    rev.reverse();
    Ok(rev)
}

/// Voltage sensitivity matrices of a radial network.
///
/// `R` and `X` relate active/reactive injection changes to voltage changes;
/// `x_inv` is the dense inverse of `X`, verified to follow the electrical
/// adjacency sparsity pattern.
#[derive(Debug, Clone)]
pub struct SensitivityMatrices {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub x_inv: DMatrix<f64>,
    /// `adjacency[(i,j)]` is true iff matrix rows i, j belong to electrically
    /// adjacent buses or i == j.
    pub adjacency: DMatrix<bool>,
}

impl SensitivityMatrices {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[(i, j)]
    }

    /// Largest eigenvalue of `X`.
    pub fn lambda_max_x(&self) -> f64 {
        self.x
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Smallest eigenvalue of `X`.
    pub fn lambda_min_x(&self) -> f64 {
        self.x
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

fn path_sum_matrices(net: &RadialNetwork) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = net.n();
    // Per-bus ordered path as cable positions; common cables form a shared
    // prefix because paths start at the root.
    let mut cable_pos: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (ci, c) in net.cables.iter().enumerate() {
        cable_pos.insert((c.from.0, c.to.0), ci);
    }
    let mut paths: Vec<Vec<usize>> = Vec::with_capacity(n);
    for b in 1..=n {
        let cables = path_cables(net, BusId(b))?;
        paths.push(
            cables
                .iter()
                .map(|c| cable_pos[&(c.from.0, c.to.0)])
                .collect(),
        );
    }
    let mut r = DMatrix::zeros(n, n);
    let mut x = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut sr = 0.0;
            let mut sx = 0.0;
            for (a, b) in paths[i].iter().zip(paths[j].iter()) {
                if a != b {
                    break;
                }
                sr += net.cables[*a].resistance;
                sx += net.cables[*a].reactance;
            }
            r[(i, j)] = sr;
            r[(j, i)] = sr;
            x[(i, j)] = sx;
            x[(j, i)] = sx;
        }
    }
    Ok((r, x))
}

/// Builds `R`, `X`, the dense inverse of `X` and the adjacency pattern.
///
/// The inverse is obtained by dense inversion and then checked against the
/// adjacency sparsity pattern, which doubles as a structural regression test
/// on every construction.
pub fn build_sensitivities(net: &RadialNetwork) -> Result<SensitivityMatrices> {
    let violations = validate_topology(net);
    if !violations.is_empty() {
        let mut msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        msgs.sort();
        return Err(Error::InvalidNetwork(msgs.join("; ")));
    }
    let n = net.n();
    let (r, x) = path_sum_matrices(net)?;

    let x_inv = x
        .clone()
        .try_inverse()
        .ok_or(Error::SingularMatrix { name: "X" })?;
    let residual = (&x_inv * &x - DMatrix::<f64>::identity(n, n)).norm();
    if residual > INVERSION_RTOL {
        return Err(Error::SingularMatrix { name: "X" });
    }

    let mut adjacency = DMatrix::from_element(n, n, false);
    for i in 0..n {
        adjacency[(i, i)] = true;
    }
    for c in &net.cables {
        if c.from.0 >= 1 {
            adjacency[(c.from.0 - 1, c.to.0 - 1)] = true;
            adjacency[(c.to.0 - 1, c.from.0 - 1)] = true;
        }
    }

    let max_abs = x_inv.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in 0..n {
            if !adjacency[(i, j)] && x_inv[(i, j)].abs() > SPARSITY_RTOL * max_abs {
                return Err(Error::SparsityViolation {
                    name: "X",
                    i,
                    j,
                    value: x_inv[(i, j)],
                });
            }
        }
    }

    Ok(SensitivityMatrices {
        r,
        x,
        x_inv,
        adjacency,
    })
}

/// Topology policy of the synthetic feeder generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branching {
    /// Pure chain 0-1-2-...
    Chain,
    /// Mostly chain with occasional laterals.
    ChainHeavy,
    /// Parent drawn uniformly among existing buses.
    Random,
}

impl std::str::FromStr for Branching {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "chain" => Ok(Branching::Chain),
            "chain-heavy" => Ok(Branching::ChainHeavy),
            "random" => Ok(Branching::Random),
            other => Err(format!(
                "unknown branching policy '{other}' (expected chain, chain-heavy or random)"
            )),
        }
    }
}

/// Linear no-control peak voltage rise the generator calibrates feeders to,
/// in pu above the substation voltage. Above `v_max - v0 = 0.05`, so a
/// full-generation snapshot violates the upper limit without control.
pub const FEEDER_TARGET_RISE: f64 = 0.08;

/// Per-cable impedance range in pu.
pub const FEEDER_IMPEDANCE_RANGE: (f64, f64) = (0.005, 0.05);

/// Generates a seed-reproducible radial feeder.
///
/// Cable impedances are uniform in [`FEEDER_IMPEDANCE_RANGE`]. PV ratings are
/// drawn per bus and then scaled so the linear no-control voltage rise at full
/// generation equals [`FEEDER_TARGET_RISE`]; reactive limits are half the PV
/// rating on each side, enough to restore the voltage limit with margin.
pub fn generate_synthetic_feeder(
    seed: u64,
    n_buses: usize,
    branching: Branching,
) -> Result<RadialNetwork> {
    if n_buses < 2 {
        return Err(Error::InvalidNetwork(format!(
            "a feeder needs at least 2 buses, got {n_buses}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (z_lo, z_hi) = FEEDER_IMPEDANCE_RANGE;

    let mut cables = Vec::with_capacity(n_buses - 1);
    for k in 1..n_buses {
        let parent = match branching {
            Branching::Chain => k - 1,
            Branching::ChainHeavy => {
                if k == 1 || rng.gen::<f64>() < 0.85 {
                    k - 1
                } else {
                    rng.gen_range(0..k)
                }
            }
            Branching::Random => {
                if k == 1 {
                    0
                } else {
                    rng.gen_range(0..k)
                }
            }
        };
        cables.push(Cable {
            from: BusId(parent),
            to: BusId(k),
            resistance: rng.gen_range(z_lo..z_hi),
            reactance: rng.gen_range(z_lo..z_hi),
        });
    }

    let n = n_buses - 1;
    let raw_rating: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();

    let mut net = RadialNetwork {
        buses: (0..n_buses).map(BusId).collect(),
        cables,
        ders: BTreeMap::new(),
        v0: 1.0,
        v_min: 0.95,
        v_max: 1.05,
        s_base: 400.0,
        v_base: 0.4,
    };
    for b in 1..n_buses {
        net.ders.insert(
            BusId(b),
            DerSpec {
                bus: BusId(b),
                q_min: 0.0,
                q_max: 0.0,
                cost: 1.0,
            },
        );
    }

    let (r, _) = path_sum_matrices(&net)?;
    let ratings = DVector::from_vec(raw_rating);
    let rise = &r * &ratings;
    let peak = rise.iter().cloned().fold(0.0f64, f64::max);
    let scale = FEEDER_TARGET_RISE / peak;
    for b in 1..n_buses {
        let rating = ratings[b - 1] * scale;
        let q_cap = 0.5 * rating;
        net.ders.insert(
            BusId(b),
            DerSpec {
                bus: BusId(b),
                q_min: -q_cap,
                q_max: q_cap,
                cost: 1.0,
            },
        );
    }
    Ok(net)
}


#[cfg(test)]
pub(crate) use tests::chain as test_chain;
