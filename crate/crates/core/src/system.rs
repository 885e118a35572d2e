//! Coupled network and component model.
//!
//! The full unknown vector is `z = [x; y]`: `x` stacks the component states
//! in component order, `y = [θ_p; V_p]` holds angle and magnitude of the
//! passive nodes (nodes without a dynamic component). A component's terminal
//! voltage is part of its own state, so the bus state of every node is a
//! fixed selection from `z`.

use crate::case::{ComponentSpec, NetworkFile};
use crate::components::{ComponentError, Droop, DynamicComponent, Setpoints, Vsg};
use crate::network::{
    build_network, injection_jacobian, power_injection, BusState, NetworkError, NetworkModel,
};
use crate::phasor::ComplexPower;
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Component(#[from] ComponentError),
    #[error("duplicate component id `{0}`")]
    DuplicateComponent(String),
    #[error("dynamic shunt refers to component `{0}`, which is not defined")]
    MissingComponent(String),
    #[error("component `{0}` is not attached to any dynamic shunt")]
    UnattachedComponent(String),
    #[error("component `{id}` declares bus `{declared}` but its shunt is at bus `{actual}`")]
    BusMismatch {
        id: String,
        declared: String,
        actual: String,
    },
    #[error("algebraic bus equations did not converge: residual {residual:.3e} after {iterations} iterations")]
    AlgebraicDiverged { residual: f64, iterations: usize },
    #[error("algebraic bus equations are singular")]
    AlgebraicSingular,
    #[error("state has {got} entries, expected {expected}")]
    StateSize { expected: usize, got: usize },
}

/// Location of a node's `(θ, V)` inside `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NodeSource {
    Component { theta: usize, v: usize },
    Passive(usize),
}

#[derive(Debug, Clone)]
pub struct System {
    net: NetworkModel,
    components: Vec<Arc<dyn DynamicComponent>>,
    setpoints_given: Vec<bool>,
    comp_node: Vec<usize>,
    offsets: Vec<usize>,
    nx: usize,
    passive: Vec<usize>,
    sources: Vec<NodeSource>,
}

pub fn build_component(spec: &ComponentSpec) -> Arc<dyn DynamicComponent> {
    let sp = spec.setpoints().map(Setpoints::from).unwrap_or_default();
    match spec {
        ComponentSpec::Vsg { id, params, .. } => Arc::new(Vsg::new(id.clone(), *params, sp)),
        ComponentSpec::Droop { id, params, .. } => Arc::new(Droop::new(id.clone(), *params, sp)),
    }
}

impl System {
    pub fn from_file(desc: &NetworkFile) -> Result<Self, SystemError> {
        let net = build_network(desc)?;
        let mut seen = std::collections::HashSet::new();
        for c in &desc.components {
            if !seen.insert(c.id()) {
                return Err(SystemError::DuplicateComponent(c.id().to_string()));
            }
        }
        for sh in net.shunts() {
            if !desc.components.iter().any(|c| c.id() == sh.component) {
                return Err(SystemError::MissingComponent(sh.component.clone()));
            }
        }
        let mut components = Vec::new();
        let mut given = Vec::new();
        let mut nodes = Vec::new();
        for spec in &desc.components {
            let sh = net
                .shunts()
                .iter()
                .find(|s| s.component == spec.id())
                .ok_or_else(|| SystemError::UnattachedComponent(spec.id().to_string()))?;
            let actual = net.node_id(sh.node);
            if actual != spec.bus() {
                return Err(SystemError::BusMismatch {
                    id: spec.id().to_string(),
                    declared: spec.bus().to_string(),
                    actual: actual.to_string(),
                });
            }
            let c = build_component(spec);
            c.validate()?;
            components.push(c);
            given.push(spec.setpoints().is_some());
            nodes.push(sh.node);
        }
        Ok(Self::assemble(net, components, given, nodes))
    }

    fn assemble(
        net: NetworkModel,
        components: Vec<Arc<dyn DynamicComponent>>,
        setpoints_given: Vec<bool>,
        comp_node: Vec<usize>,
    ) -> Self {
        let n = net.node_count();
        let mut offsets = Vec::with_capacity(components.len());
        let mut nx = 0;
        let mut sources = vec![None; n];
        for (c, &node) in components.iter().zip(&comp_node) {
            offsets.push(nx);
            sources[node] = Some(NodeSource::Component {
                theta: nx + c.theta_index(),
                v: nx + c.v_index(),
            });
            nx += c.dim();
        }
        let passive: Vec<usize> = (0..n).filter(|&i| sources[i].is_none()).collect();
        for (j, &node) in passive.iter().enumerate() {
            sources[node] = Some(NodeSource::Passive(j));
        }
        Self {
            net,
            components,
            setpoints_given,
            comp_node,
            offsets,
            nx,
            passive,
            sources: sources.into_iter().map(|s| s.unwrap()).collect(),
        }
    }

    pub fn network(&self) -> &NetworkModel {
        &self.net
    }

    pub fn components(&self) -> &[Arc<dyn DynamicComponent>] {
        &self.components
    }

    pub fn component_index(&self, id: &str) -> Option<usize> {
        self.components.iter().position(|c| c.id() == id)
    }

    pub fn setpoints_given(&self, c: usize) -> bool {
        self.setpoints_given[c]
    }

    pub fn component_node(&self, c: usize) -> usize {
        self.comp_node[c]
    }

    pub fn component_range(&self, c: usize) -> std::ops::Range<usize> {
        self.offsets[c]..self.offsets[c] + self.components[c].dim()
    }

    pub fn passive_nodes(&self) -> &[usize] {
        &self.passive
    }

    /// Number of component states.
    pub fn nx(&self) -> usize {
        self.nx
    }

    /// Number of algebraic unknowns.
    pub fn ny(&self) -> usize {
        2 * self.passive.len()
    }

    pub fn nz(&self) -> usize {
        self.nx + self.ny()
    }

    /// Every component is invariant under a common angle shift, so the
    /// equilibrium set contains a rotation family.
    pub fn angle_invariant(&self) -> bool {
        self.components.iter().all(|c| c.angle_invariant())
    }

    pub fn with_network(&self, net: NetworkModel) -> Self {
        Self {
            net,
            ..self.clone()
        }
    }

    pub fn with_components(&self, components: Vec<Arc<dyn DynamicComponent>>) -> Self {
        assert_eq!(components.len(), self.components.len());
        Self {
            components,
            setpoints_given: vec![true; self.setpoints_given.len()],
            ..self.clone()
        }
    }

    /// Bus state of every node from stacked component states and passive
    /// unknowns.
    pub fn bus_state(&self, x: &[f64], y: &[f64]) -> BusState {
        let np = self.passive.len();
        let mut v = Vec::with_capacity(self.sources.len());
        let mut theta = Vec::with_capacity(self.sources.len());
        for s in &self.sources {
            match *s {
                NodeSource::Component { theta: t, v: vi } => {
                    theta.push(x[t]);
                    v.push(x[vi]);
                }
                NodeSource::Passive(j) => {
                    theta.push(y[j]);
                    v.push(y[np + j]);
                }
            }
        }
        BusState::new(v, theta)
    }

    /// Passive unknowns `y` read from a full bus state.
    pub fn passive_of(&self, s: &BusState) -> Vec<f64> {
        let mut y: Vec<f64> = self.passive.iter().map(|&i| s.theta[i]).collect();
        y.extend(self.passive.iter().map(|&i| s.v[i]));
        y
    }

    /// Component states with terminal values from `s` and internal states
    /// at rest.
    pub fn states_at(&self, s: &BusState) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.nx);
        for (c, &node) in self.components.iter().zip(&self.comp_node) {
            x.extend(c.state_at_terminal(s.v[node], s.theta[node]));
        }
        x
    }

    pub fn equilibrium_states(&self) -> Vec<f64> {
        self.components
            .iter()
            .flat_map(|c| c.equilibrium_state())
            .collect()
    }

    /// Power each component generates: network injection plus local load.
    pub fn component_inputs(&self, s: &BusState) -> Vec<ComplexPower> {
        let inj = power_injection(&self.net, s);
        self.comp_node
            .iter()
            .map(|&node| {
                let (p0, q0) = self.net.load_at(node);
                ComplexPower::new(inj[node].active + p0, inj[node].reactive + q0)
            })
            .collect()
    }

    /// Active and reactive balance at the passive nodes, `[ΔP…, ΔQ…]`.
    pub fn passive_mismatch(&self, s: &BusState) -> Vec<f64> {
        let inj = power_injection(&self.net, s);
        let np = self.passive.len();
        let mut out = vec![0.0; 2 * np];
        for (j, &node) in self.passive.iter().enumerate() {
            let (p0, q0) = self.net.load_at(node);
            out[j] = inj[node].active + p0;
            out[np + j] = inj[node].reactive + q0;
        }
        out
    }

    /// Component state derivatives with the bus state already known.
    pub fn derivative_at(&self, x: &[f64], s: &BusState, out: &mut [f64]) {
        let u = self.component_inputs(s);
        for (c, comp) in self.components.iter().enumerate() {
            let r = self.component_range(c);
            comp.derivative(&x[r.clone()], u[c], &mut out[r]);
        }
    }

    /// `F(z) = [f(x, u); passive balance]`.
    pub fn residual(&self, z: &[f64]) -> Vec<f64> {
        let (x, y) = z.split_at(self.nx);
        let s = self.bus_state(x, y);
        let mut out = vec![0.0; self.nz()];
        self.derivative_at(x, &s, &mut out[..self.nx]);
        out[self.nx..].copy_from_slice(&self.passive_mismatch(&s));
        out
    }

    /// Selection `S` with `(θ, V)` of all nodes `= S z`.
    fn selection(&self) -> DMatrix<f64> {
        let n = self.sources.len();
        let np = self.passive.len();
        let mut sel = DMatrix::zeros(2 * n, self.nz());
        for (i, s) in self.sources.iter().enumerate() {
            match *s {
                NodeSource::Component { theta, v } => {
                    sel[(i, theta)] = 1.0;
                    sel[(n + i, v)] = 1.0;
                }
                NodeSource::Passive(j) => {
                    sel[(i, self.nx + j)] = 1.0;
                    sel[(n + i, self.nx + np + j)] = 1.0;
                }
            }
        }
        sel
    }

    /// Dense Jacobian `∂F/∂z`.
    pub fn jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let (x, y) = z.split_at(self.nx);
        let s = self.bus_state(x, y);
        let n = self.sources.len();
        let np = self.passive.len();
        let dinj = injection_jacobian(&self.net, &s) * self.selection();
        let u = self.component_inputs(&s);
        let mut jac = DMatrix::zeros(self.nz(), self.nz());
        for (c, comp) in self.components.iter().enumerate() {
            let r = self.component_range(c);
            let (fx, fu) = comp.jacobian(&x[r.clone()], u[c]);
            let node = self.comp_node[c];
            let mut du = DMatrix::zeros(2, self.nz());
            du.row_mut(0).copy_from(&dinj.row(node));
            du.row_mut(1).copy_from(&dinj.row(n + node));
            let block = &fu * du;
            for (a, row) in r.clone().enumerate() {
                for b in 0..self.nz() {
                    jac[(row, b)] += block[(a, b)];
                }
                for (b, col) in r.clone().enumerate() {
                    jac[(row, col)] += fx[(a, b)];
                }
            }
        }
        for (j, &node) in self.passive.iter().enumerate() {
            jac.row_mut(self.nx + j).copy_from(&dinj.row(node));
            jac.row_mut(self.nx + np + j).copy_from(&dinj.row(n + node));
        }
        jac
    }

    /// `∂(passive balance)/∂y` at a bus state.
    pub fn algebraic_jacobian(&self, s: &BusState) -> DMatrix<f64> {
        let n = self.sources.len();
        let np = self.passive.len();
        let full = injection_jacobian(&self.net, s);
        let mut j = DMatrix::zeros(2 * np, 2 * np);
        for (a, &ra) in self.passive.iter().enumerate() {
            for (b, &cb) in self.passive.iter().enumerate() {
                j[(a, b)] = full[(ra, cb)];
                j[(a, np + b)] = full[(ra, n + cb)];
                j[(np + a, b)] = full[(n + ra, cb)];
                j[(np + a, np + b)] = full[(n + ra, n + cb)];
            }
        }
        j
    }

    /// Newton solve of the passive balance for fixed component states.
    /// Returns the solution and the number of iterations used.
    pub fn solve_algebraic(
        &self,
        x: &[f64],
        y0: &[f64],
        tol: f64,
        max_iter: usize,
    ) -> Result<(Vec<f64>, usize), SystemError> {
        let ny = self.ny();
        let mut y = y0.to_vec();
        if ny == 0 {
            return Ok((y, 0));
        }
        let mut s = self.bus_state(x, &y);
        let mut res = self.passive_mismatch(&s);
        let mut norm = inf_norm(&res);
        for it in 0..=max_iter {
            if norm <= tol {
                // One more full step removes the tolerance-sized remainder
                // that would otherwise leak into path integrals.
                if norm > 0.0 {
                    if let Some(dy) = self
                        .algebraic_jacobian(&s)
                        .lu()
                        .solve(&-DVector::from_column_slice(&res))
                    {
                        let trial: Vec<f64> = y.iter().zip(dy.iter()).map(|(a, d)| a + d).collect();
                        let ts = self.bus_state(x, &trial);
                        if ts.v.iter().all(|&v| v > 0.0)
                            && inf_norm(&self.passive_mismatch(&ts)) < norm
                        {
                            y = trial;
                        }
                    }
                }
                return Ok((y, it));
            }
            if it == max_iter {
                break;
            }
            let rhs = -DVector::from_column_slice(&res);
            let dy = self
                .algebraic_jacobian(&s)
                .lu()
                .solve(&rhs)
                .ok_or(SystemError::AlgebraicSingular)?;
            let mut step = 1.0;
            loop {
                let trial: Vec<f64> = y.iter().zip(dy.iter()).map(|(a, d)| a + step * d).collect();
                let ts = self.bus_state(x, &trial);
                let r = self.passive_mismatch(&ts);
                let nr = inf_norm(&r);
                let positive = ts.v.iter().all(|&v| v > 0.0);
                if positive && (nr < norm || step < 1e-4) {
                    y = trial;
                    s = ts;
                    res = r;
                    norm = nr;
                    break;
                }
                if step < 1e-4 {
                    return Err(SystemError::AlgebraicDiverged {
                        residual: norm,
                        iterations: it,
                    });
                }
                step *= 0.5;
            }
        }
        Err(SystemError::AlgebraicDiverged {
            residual: norm,
            iterations: max_iter,
        })
    }

    /// Storage of each component.
    pub fn storages(&self, x: &[f64]) -> Result<Vec<f64>, ComponentError> {
        (0..self.components.len())
            .map(|c| self.components[c].storage(&x[self.component_range(c)]))
            .collect()
    }
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, a| m.max(a.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case3() -> System {
        System::from_file(&NetworkFile::builtin("case3bus").unwrap()).unwrap()
    }

    #[test]
    fn layout_of_the_three_bus_case() {
        let sys = case3();
        assert_eq!(sys.nx(), 5);
        assert_eq!(sys.ny(), 2);
        assert_eq!(sys.passive_nodes(), &[2]);
        assert!(!sys.angle_invariant());
        assert_eq!(sys.component_range(1), 3..5);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let sys = case3();
        let s = BusState::new(vec![1.0, 0.97, 0.95], vec![0.0, 0.001, -0.0015]);
        let mut x = sys.states_at(&s);
        x[1] = 0.03;
        let mut z = x.clone();
        z.extend(sys.passive_of(&s));
        let jac = sys.jacobian(&z);
        let h = 1e-6;
        for j in 0..z.len() {
            let (mut up, mut dn) = (z.clone(), z.clone());
            up[j] += h;
            dn[j] -= h;
            let (fu, fd) = (sys.residual(&up), sys.residual(&dn));
            for i in 0..z.len() {
                let fdv = (fu[i] - fd[i]) / (2.0 * h);
                assert!(
                    (fdv - jac[(i, j)]).abs() < 1e-6 * (1.0 + fdv.abs()),
                    "({i},{j})"
                );
            }
        }
    }

    #[test]
    fn algebraic_solve_closes_the_balance() {
        let sys = case3();
        let s = BusState::new(vec![1.0, 0.97, 1.0], vec![0.0, 0.001, 0.0]);
        let x = sys.states_at(&s);
        let (y, _) = sys.solve_algebraic(&x, &[0.0, 1.0], 1e-12, 20).unwrap();
        let bs = sys.bus_state(&x, &y);
        assert!(inf_norm(&sys.passive_mismatch(&bs)) < 1e-12);
        assert!((y[1] - 0.950_271_12).abs() < 1e-6);
    }

    #[test]
    fn shunt_without_component_is_rejected() {
        let mut d = NetworkFile::builtin("case3bus").unwrap();
        d.components.pop();
        assert_eq!(
            System::from_file(&d).unwrap_err(),
            SystemError::MissingComponent("droop2".into())
        );
    }
}
