//! Circuit graph, lossless line structure and power-flow maps.
//!
//! Buses other than ground are called *nodes* and are indexed `0..n` in the
//! order they appear in the description. Bus states, injections and all
//! coordinate vectors downstream use that node order.
//!
//! Sign conventions: constant-power branches are stored consumption-positive
//! as written in case files. Every injection returned from this module is
//! generation-positive, `S = −Ī*·V̄`, i.e. the power flowing from the shunt
//! side into the lines. `ConstantPower::generation` is the single conversion
//! point between the two.

use crate::case::{BranchSpec, BusKindSpec, NetworkFile};
use crate::phasor::ComplexPower;
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;
use std::collections::{HashMap, HashSet, VecDeque};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("network has no ground bus")]
    NoGround,
    #[error("more than one ground bus: {0:?}")]
    MultipleGround(Vec<String>),
    #[error("duplicate bus id `{0}`")]
    DuplicateBus(String),
    #[error("duplicate branch id `{0}`")]
    DuplicateBranch(String),
    #[error("branch `{branch}` refers to unknown bus `{bus}`")]
    UnknownBus { branch: String, bus: String },
    #[error("branch `{0}` connects a bus to itself")]
    SelfLoop(String),
    #[error("line `{0}` has zero reactance")]
    ZeroReactance(String),
    #[error("line `{branch}` has negative reactance {x}")]
    NegativeReactance { branch: String, x: f64 },
    #[error("line `{branch}` has conductance {g}; only lossless lines are supported")]
    LossyLine { branch: String, g: f64 },
    #[error("line `{0}` touches the ground bus")]
    LineToGround(String),
    #[error("branch `{0}` must terminate at the ground bus")]
    NotGrounded(String),
    #[error("non-finite parameter on branch `{0}`")]
    NonFinite(String),
    #[error("bus `{0}` is not connected to the rest of the network")]
    Disconnected(String),
    #[error("dynamic bus `{bus}`: {reason}")]
    DynamicBus { bus: String, reason: String },
    #[error("bus `{bus}`: voltage magnitude {v} is not positive")]
    NonPositiveVoltage { bus: String, v: f64 },
    #[error("bus state has {got} entries, network has {expected} nodes")]
    StateSize { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum BusKind {
    Ground,
    Dynamic { component: String },
    Passive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bus {
    pub id: String,
    pub kind: BusKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum BranchKind {
    LosslessLine {
        reactance: f64,
    },
    /// Consumption-positive load.
    ConstantPower {
        p0: f64,
        q0: f64,
    },
    DynamicShunt {
        component: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Branch {
    pub id: String,
    /// Bus index (into `NetworkModel::buses`).
    pub from: usize,
    pub to: usize,
    pub kind: BranchKind,
}

/// A lossless line between two nodes with coupling `B = 1/x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Line {
    pub branch: usize,
    pub from: usize,
    pub to: usize,
    pub coupling: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConstantPower {
    pub branch: usize,
    pub node: usize,
    pub p0: f64,
    pub q0: f64,
}

impl ConstantPower {
    /// The load's own generation, `−(p⁰ + j q⁰)`.
    pub fn generation(&self) -> ComplexPower {
        ComplexPower::new(-self.p0, -self.q0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Shunt {
    pub branch: usize,
    pub node: usize,
    pub component: String,
}

/// Validated, immutable network.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetworkModel {
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    ground: usize,
    nodes: Vec<usize>,
    node_of_bus: Vec<Option<usize>>,
    lines: Vec<Line>,
    loads: Vec<ConstantPower>,
    shunts: Vec<Shunt>,
    load_p: Vec<f64>,
    load_q: Vec<f64>,
}

/// Voltage magnitude and unwrapped angle at every node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BusState {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
}

impl BusState {
    pub fn new(v: Vec<f64>, theta: Vec<f64>) -> Self {
        assert_eq!(v.len(), theta.len(), "magnitude/angle length mismatch");
        Self { v, theta }
    }

    pub fn flat(n: usize) -> Self {
        Self::new(vec![1.0; n], vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn phasor(&self, node: usize) -> Complex64 {
        Complex64::from_polar(self.v[node], self.theta[node])
    }

    /// `(θ, ln V)` coordinates, angles first.
    pub fn log_coordinates(&self) -> Vec<f64> {
        self.theta
            .iter()
            .copied()
            .chain(self.v.iter().map(|v| v.ln()))
            .collect()
    }

    pub fn from_log_coordinates(z: &[f64]) -> Self {
        let n = z.len() / 2;
        Self::new(z[n..].iter().map(|r| r.exp()).collect(), z[..n].to_vec())
    }

    pub fn shift_angles(&self, c: f64) -> Self {
        Self::new(self.v.clone(), self.theta.iter().map(|t| t + c).collect())
    }
}

impl NetworkModel {
    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn ground(&self) -> usize {
        self.ground
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Bus id of a node.
    pub fn node_id(&self, node: usize) -> &str {
        &self.buses[self.nodes[node]].id
    }

    pub fn node_of(&self, bus_id: &str) -> Option<usize> {
        self.buses
            .iter()
            .position(|b| b.id == bus_id)
            .and_then(|b| self.node_of_bus[b])
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn loads(&self) -> &[ConstantPower] {
        &self.loads
    }

    pub fn shunts(&self) -> &[Shunt] {
        &self.shunts
    }

    /// Aggregated consumption-positive load `(p⁰, q⁰)` at a node.
    pub fn load_at(&self, node: usize) -> (f64, f64) {
        (self.load_p[node], self.load_q[node])
    }

    pub fn has_load(&self, node: usize) -> bool {
        self.loads.iter().any(|l| l.node == node)
    }

    pub fn branch_index(&self, id: &str) -> Option<usize> {
        self.branches.iter().position(|b| b.id == id)
    }

    /// Coupling `B_ik` between two nodes (sum over parallel lines).
    pub fn coupling(&self, i: usize, k: usize) -> f64 {
        self.lines
            .iter()
            .filter(|l| (l.from == i && l.to == k) || (l.from == k && l.to == i))
            .map(|l| l.coupling)
            .sum()
    }

    /// Dense symmetric coupling matrix with `B_ik` off the diagonal.
    pub fn coupling_matrix(&self) -> DMatrix<f64> {
        let n = self.node_count();
        let mut b = DMatrix::zeros(n, n);
        for l in &self.lines {
            b[(l.from, l.to)] += l.coupling;
            b[(l.to, l.from)] += l.coupling;
        }
        b
    }

    /// Copy with one line's coupling multiplied by `factor`.
    pub fn with_line_scaled(&self, branch: usize, factor: f64) -> Option<Self> {
        let mut out = self.clone();
        let line = out.lines.iter_mut().find(|l| l.branch == branch)?;
        line.coupling *= factor;
        if let BranchKind::LosslessLine { reactance } = &mut out.branches[branch].kind {
            *reactance /= factor;
        }
        Some(out)
    }

    /// Copy with extra consumption at a node. The step is folded into the
    /// node's first load branch, or recorded as a new aggregate when the
    /// node has no load.
    pub fn with_load_added(&self, node: usize, dp0: f64, dq0: f64) -> Self {
        let mut out = self.clone();
        out.load_p[node] += dp0;
        out.load_q[node] += dq0;
        if let Some(load) = out.loads.iter_mut().find(|l| l.node == node) {
            load.p0 += dp0;
            load.q0 += dq0;
            if let BranchKind::ConstantPower { p0, q0 } = &mut out.branches[load.branch].kind {
                *p0 += dp0;
                *q0 += dq0;
            }
        }
        out
    }

    pub fn check_state(&self, s: &BusState) -> Result<(), NetworkError> {
        if s.len() != self.node_count() {
            return Err(NetworkError::StateSize {
                expected: self.node_count(),
                got: s.len(),
            });
        }
        for (node, &v) in s.v.iter().enumerate() {
            if !(v > 0.0) {
                return Err(NetworkError::NonPositiveVoltage {
                    bus: self.node_id(node).to_string(),
                    v,
                });
            }
        }
        Ok(())
    }
}

/// Validates a parsed description and derives the line/load/shunt tables.
pub fn build_network(desc: &NetworkFile) -> Result<NetworkModel, NetworkError> {
    let mut index = HashMap::new();
    let mut buses = Vec::with_capacity(desc.buses.len());
    for b in &desc.buses {
        if index.insert(b.id.clone(), buses.len()).is_some() {
            return Err(NetworkError::DuplicateBus(b.id.clone()));
        }
        let kind = match (&b.kind, &b.component) {
            (BusKindSpec::Ground, None) => BusKind::Ground,
            (BusKindSpec::Passive, None) => BusKind::Passive,
            (BusKindSpec::Dynamic, Some(c)) => BusKind::Dynamic {
                component: c.clone(),
            },
            (BusKindSpec::Dynamic, None) => {
                return Err(NetworkError::DynamicBus {
                    bus: b.id.clone(),
                    reason: "no component id".into(),
                })
            }
            (_, Some(_)) => {
                return Err(NetworkError::DynamicBus {
                    bus: b.id.clone(),
                    reason: "only dynamic buses carry a component id".into(),
                })
            }
        };
        buses.push(Bus {
            id: b.id.clone(),
            kind,
        });
    }

    let grounds: Vec<usize> = (0..buses.len())
        .filter(|&i| buses[i].kind == BusKind::Ground)
        .collect();
    let ground = match grounds.as_slice() {
        [] => return Err(NetworkError::NoGround),
        [g] => *g,
        many => {
            return Err(NetworkError::MultipleGround(
                many.iter().map(|&i| buses[i].id.clone()).collect(),
            ))
        }
    };

    let mut node_of_bus = vec![None; buses.len()];
    let mut nodes = Vec::new();
    for (i, b) in buses.iter().enumerate() {
        if b.kind != BusKind::Ground {
            node_of_bus[i] = Some(nodes.len());
            nodes.push(i);
        }
    }

    let mut branch_ids = HashSet::new();
    let mut branches = Vec::with_capacity(desc.branches.len());
    let mut lines = Vec::new();
    let mut loads = Vec::new();
    let mut shunts: Vec<Shunt> = Vec::new();
    for spec in &desc.branches {
        let (id, from, to) = spec.endpoints();
        if !branch_ids.insert(id.to_string()) {
            return Err(NetworkError::DuplicateBranch(id.to_string()));
        }
        let lookup = |bus: &str| {
            index
                .get(bus)
                .copied()
                .ok_or_else(|| NetworkError::UnknownBus {
                    branch: id.to_string(),
                    bus: bus.to_string(),
                })
        };
        let (f, t) = (lookup(from)?, lookup(to)?);
        if f == t {
            return Err(NetworkError::SelfLoop(id.to_string()));
        }
        let bidx = branches.len();
        let kind = match spec {
            BranchSpec::LosslessLine { x, g, .. } => {
                if !x.is_finite() || !g.is_finite() {
                    return Err(NetworkError::NonFinite(id.to_string()));
                }
                if *x == 0.0 {
                    return Err(NetworkError::ZeroReactance(id.to_string()));
                }
                if *x < 0.0 {
                    return Err(NetworkError::NegativeReactance {
                        branch: id.to_string(),
                        x: *x,
                    });
                }
                if *g != 0.0 {
                    return Err(NetworkError::LossyLine {
                        branch: id.to_string(),
                        g: *g,
                    });
                }
                if f == ground || t == ground {
                    return Err(NetworkError::LineToGround(id.to_string()));
                }
                lines.push(Line {
                    branch: bidx,
                    from: node_of_bus[f].unwrap(),
                    to: node_of_bus[t].unwrap(),
                    coupling: 1.0 / x,
                });
                BranchKind::LosslessLine { reactance: *x }
            }
            BranchSpec::ConstantPower { p0, q0, .. } => {
                if !p0.is_finite() || !q0.is_finite() {
                    return Err(NetworkError::NonFinite(id.to_string()));
                }
                if t != ground {
                    return Err(NetworkError::NotGrounded(id.to_string()));
                }
                loads.push(ConstantPower {
                    branch: bidx,
                    node: node_of_bus[f].unwrap(),
                    p0: *p0,
                    q0: *q0,
                });
                BranchKind::ConstantPower { p0: *p0, q0: *q0 }
            }
            BranchSpec::DynamicShunt { component, .. } => {
                if t != ground {
                    return Err(NetworkError::NotGrounded(id.to_string()));
                }
                match &buses[f].kind {
                    BusKind::Dynamic { component: c } if c == component => {}
                    _ => {
                        return Err(NetworkError::DynamicBus {
                            bus: buses[f].id.clone(),
                            reason: format!(
                                "dynamic shunt `{id}` for component `{component}` does not match the bus"
                            ),
                        })
                    }
                }
                let node = node_of_bus[f].unwrap();
                if shunts.iter().any(|s| s.node == node) {
                    return Err(NetworkError::DynamicBus {
                        bus: buses[f].id.clone(),
                        reason: "more than one dynamic component".into(),
                    });
                }
                shunts.push(Shunt {
                    branch: bidx,
                    node,
                    component: component.clone(),
                });
                BranchKind::DynamicShunt {
                    component: component.clone(),
                }
            }
        };
        branches.push(Branch {
            id: id.to_string(),
            from: f,
            to: t,
            kind,
        });
    }

    for (i, b) in buses.iter().enumerate() {
        if let BusKind::Dynamic { .. } = b.kind {
            if !shunts.iter().any(|s| nodes[s.node] == i) {
                return Err(NetworkError::DynamicBus {
                    bus: b.id.clone(),
                    reason: "no dynamic shunt branch".into(),
                });
            }
        }
    }

    // Nodes must form one island through the lines.
    let mut adj = vec![Vec::new(); nodes.len()];
    for l in &lines {
        adj[l.from].push(l.to);
        adj[l.to].push(l.from);
    }
    let mut seen = vec![false; nodes.len()];
    if !nodes.is_empty() {
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &w in &adj[u] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(NetworkError::Disconnected(buses[nodes[i]].id.clone()));
    }

    let n = nodes.len();
    let mut load_p = vec![0.0; n];
    let mut load_q = vec![0.0; n];
    for l in &loads {
        load_p[l.node] += l.p0;
        load_q[l.node] += l.q0;
    }

    Ok(NetworkModel {
        buses,
        branches,
        ground,
        nodes,
        node_of_bus,
        lines,
        loads,
        shunts,
        load_p,
        load_q,
    })
}

/// Network-side injection at every node, closed form:
/// `P_i = Σ B V_i V_k sin θ_ik`, `Q_i = Σ B (V_i² − V_i V_k cos θ_ik)`.
pub fn power_injection(net: &NetworkModel, s: &BusState) -> Vec<ComplexPower> {
    let mut out = vec![ComplexPower::default(); net.node_count()];
    for l in &net.lines {
        let (i, k, b) = (l.from, l.to, l.coupling);
        let (vi, vk) = (s.v[i], s.v[k]);
        let (sin, cos) = (s.theta[i] - s.theta[k]).sin_cos();
        let p = b * vi * vk * sin;
        out[i].active += p;
        out[k].active -= p;
        out[i].reactive += b * (vi * vi - vi * vk * cos);
        out[k].reactive += b * (vk * vk - vi * vk * cos);
    }
    out
}

/// Jacobian of [`power_injection`]: rows `(P_0..P_n, Q_0..Q_n)`, columns
/// `(θ_0..θ_n, V_0..V_n)`.
pub fn injection_jacobian(net: &NetworkModel, s: &BusState) -> DMatrix<f64> {
    let n = net.node_count();
    let mut j = DMatrix::zeros(2 * n, 2 * n);
    for l in &net.lines {
        let b = l.coupling;
        for (i, k) in [(l.from, l.to), (l.to, l.from)] {
            let (vi, vk) = (s.v[i], s.v[k]);
            let (sin, cos) = (s.theta[i] - s.theta[k]).sin_cos();
            j[(i, i)] += b * vi * vk * cos;
            j[(i, k)] -= b * vi * vk * cos;
            j[(i, n + i)] += b * vk * sin;
            j[(i, n + k)] += b * vi * sin;
            j[(n + i, i)] += b * vi * vk * sin;
            j[(n + i, k)] -= b * vi * vk * sin;
            j[(n + i, n + i)] += b * (2.0 * vi - vk * cos);
            j[(n + i, n + k)] -= b * vi * cos;
        }
    }
    j
}

/// Branch voltage `V̄_from − V̄_to` for every branch (ground is `0∠0`).
pub fn branch_voltages(net: &NetworkModel, s: &BusState) -> Vec<Complex64> {
    let phasor = |bus: usize| match net.node_of_bus[bus] {
        Some(node) => s.phasor(node),
        None => Complex64::new(0.0, 0.0),
    };
    net.branches
        .iter()
        .map(|b| phasor(b.from) - phasor(b.to))
        .collect()
}

fn line_current(line_voltage: Complex64, coupling: f64) -> Complex64 {
    // Ī = V̄ / (j x) = −j B V̄
    Complex64::new(0.0, -coupling) * line_voltage
}

fn load_current(v: Complex64, p0: f64, q0: f64) -> Complex64 {
    // Ī*·V̄ = p⁰ + j q⁰
    (Complex64::new(p0, q0) / v).conj()
}

/// Branch currents by direct complex arithmetic: `Ī = y V̄` on lines,
/// `Ī = ((p⁰ + j q⁰)/V̄)*` on loads, and each dynamic shunt current closed by
/// KCL at its bus.
pub fn branch_currents_oracle(net: &NetworkModel, s: &BusState) -> Vec<Complex64> {
    let voltages = branch_voltages(net, s);
    let mut currents = vec![Complex64::new(0.0, 0.0); net.branches.len()];
    let mut leaving = vec![Complex64::new(0.0, 0.0); net.node_count()];
    for l in &net.lines {
        let i = line_current(voltages[l.branch], l.coupling);
        currents[l.branch] = i;
        leaving[l.from] += i;
        leaving[l.to] -= i;
    }
    for ld in &net.loads {
        let i = load_current(s.phasor(ld.node), ld.p0, ld.q0);
        currents[ld.branch] = i;
        leaving[ld.node] += i;
    }
    for sh in &net.shunts {
        currents[sh.branch] = -leaving[sh.node];
    }
    currents
}

/// Branch currents with dynamic shunt currents taken from the components'
/// generation, `Ī = −((P + jQ)/V̄)*`. `generation` is indexed by node and is
/// ignored at nodes without a dynamic shunt.
pub fn branch_currents(
    net: &NetworkModel,
    s: &BusState,
    generation: &[ComplexPower],
) -> Vec<Complex64> {
    let voltages = branch_voltages(net, s);
    let mut currents = vec![Complex64::new(0.0, 0.0); net.branches.len()];
    for l in &net.lines {
        currents[l.branch] = line_current(voltages[l.branch], l.coupling);
    }
    for ld in &net.loads {
        currents[ld.branch] = load_current(s.phasor(ld.node), ld.p0, ld.q0);
    }
    for sh in &net.shunts {
        let g = generation[sh.node];
        currents[sh.branch] = -(g.to_complex() / s.phasor(sh.node)).conj();
    }
    currents
}

/// Network-side injections recovered from the oracle's line currents:
/// `S_i = V̄_i · (Σ Ī_leaving)*`.
pub fn oracle_injection(net: &NetworkModel, s: &BusState) -> Vec<ComplexPower> {
    let currents = branch_currents_oracle(net, s);
    let mut leaving = vec![Complex64::new(0.0, 0.0); net.node_count()];
    for l in &net.lines {
        leaving[l.from] += currents[l.branch];
        leaving[l.to] -= currents[l.branch];
    }
    leaving
        .iter()
        .enumerate()
        .map(|(node, i)| {
            let sp = s.phasor(node) * i.conj();
            ComplexPower::new(sp.re, sp.im)
        })
        .collect()
}

/// `Σ V̄_μ Ī*_μ` over all branches and the sum of term magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TellegenSum {
    pub sum: Complex64,
    pub scale: f64,
}

impl TellegenSum {
    pub fn relative(&self) -> f64 {
        if self.scale > 0.0 {
            self.sum.norm() / self.scale
        } else {
            self.sum.norm()
        }
    }
}

pub fn tellegen_sum(net: &NetworkModel, s: &BusState, currents: &[Complex64]) -> TellegenSum {
    let voltages = branch_voltages(net, s);
    let mut sum = Complex64::new(0.0, 0.0);
    let mut scale = 0.0;
    for (v, i) in voltages.iter().zip(currents) {
        let term = v * i.conj();
        sum += term;
        scale += term.norm();
    }
    TellegenSum { sum, scale }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("constant-power bus `{bus}` has zero voltage; KCL residual is singular")]
pub struct SingularLoadBus {
    pub bus: String,
}

/// Complex nodal current balance: current leaving into lines and loads minus
/// current supplied by the dynamic component. `generation` is indexed by node.
pub fn kcl_residual(
    net: &NetworkModel,
    s: &BusState,
    generation: &[ComplexPower],
) -> Result<Vec<Complex64>, SingularLoadBus> {
    let n = net.node_count();
    for ld in &net.loads {
        if s.v[ld.node] == 0.0 {
            return Err(SingularLoadBus {
                bus: net.node_id(ld.node).to_string(),
            });
        }
    }
    let voltages = branch_voltages(net, s);
    let mut res = vec![Complex64::new(0.0, 0.0); n];
    for l in &net.lines {
        let i = line_current(voltages[l.branch], l.coupling);
        res[l.from] += i;
        res[l.to] -= i;
    }
    for ld in &net.loads {
        res[ld.node] += load_current(s.phasor(ld.node), ld.p0, ld.q0);
    }
    for sh in &net.shunts {
        let g = generation[sh.node];
        if s.v[sh.node] != 0.0 {
            res[sh.node] -= (g.to_complex() / s.phasor(sh.node)).conj();
        }
    }
    Ok(res)
}
