//! Fixed-step transient simulation of the coupled system with energy
//! diagnostics.
//!
//! Differential states are advanced by classical RK4 (or implicit
//! trapezoidal), and the passive-bus balance is re-solved by Newton at every
//! stage. Path integrals are accumulated at every integration step; all other
//! diagnostics are evaluated at output samples only.
//!
//! Events are applied on the step grid. A state perturbation or a network
//! change makes `V_p` and `W` jump without any path being traversed; these
//! jumps are recorded so that the identity residuals compare like with like.

use crate::case::{
    DisturbanceSpec, InitialSpec, IntegratorSpec, NetworkFile, ScenarioSpec, SolverSpec,
};
use crate::components::Convention;
use crate::equilibrium::{solve_case, EquilibriumError, EquilibriumOptions, EquilibriumSolution};
use crate::network::{branch_currents, tellegen_sum, BusState, NetworkModel};
use crate::phasor::ComplexPower;
use crate::potential::{PathIntegralAccumulator, PortSample, PotentialContext};
use crate::system::{inf_norm, System, SystemError};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("algebraic solve failed at t = {t}: {source}")]
    Algebraic { t: f64, source: SystemError },
    #[error("implicit step did not converge at t = {t}: residual {residual:.3e}")]
    Implicit { t: f64, residual: f64 },
    #[error("voltage at bus `{bus}` is non-positive ({v}) at t = {t}; simulation aborted")]
    NonPositiveVoltage { t: f64, bus: String, v: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    Rk4,
    Trapezoidal,
}

impl From<IntegratorSpec> for Integrator {
    fn from(i: IntegratorSpec) -> Self {
        match i {
            IntegratorSpec::Rk4 => Integrator::Rk4,
            IntegratorSpec::Trapezoidal => Integrator::Trapezoidal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimOptions {
    pub h: f64,
    pub integrator: Integrator,
    pub algebraic_tol: f64,
    pub max_algebraic_iter: usize,
    /// Sign convention of the supply-rate column.
    pub convention: Convention,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            h: 1e-3,
            integrator: Integrator::Rk4,
            algebraic_tol: 1e-10,
            max_algebraic_iter: 30,
            convention: Convention::Negated,
        }
    }
}

impl SimOptions {
    pub fn from_spec(spec: &SolverSpec) -> Self {
        let d = Self::default();
        Self {
            h: spec.h.unwrap_or(d.h),
            integrator: spec
                .integrator
                .map(Integrator::from)
                .unwrap_or(d.integrator),
            algebraic_tol: spec.algebraic_tol.unwrap_or(d.algebraic_tol),
            max_algebraic_iter: d.max_algebraic_iter,
            convention: spec
                .convention
                .map(Convention::from)
                .unwrap_or(d.convention),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum InitialCondition {
    Equilibrium,
    /// Stacked component states.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Disturbance {
    StatePerturbation {
        at: f64,
        component: usize,
        /// `(state index, offset)`.
        delta: Vec<(usize, f64)>,
    },
    LoadStep {
        at: f64,
        node: usize,
        dp0: f64,
        dq0: f64,
        duration: Option<f64>,
    },
    LineScale {
        at: f64,
        branch: usize,
        factor: f64,
        duration: Option<f64>,
    },
}

impl Disturbance {
    pub fn at(&self) -> f64 {
        match self {
            Disturbance::StatePerturbation { at, .. }
            | Disturbance::LoadStep { at, .. }
            | Disturbance::LineScale { at, .. } => *at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub initial: InitialCondition,
    pub disturbances: Vec<Disturbance>,
    pub horizon: f64,
    pub sample_period: f64,
}

impl Scenario {
    /// Undisturbed run from the equilibrium.
    pub fn quiet(horizon: f64, sample_period: f64) -> Self {
        Self {
            initial: InitialCondition::Equilibrium,
            disturbances: Vec::new(),
            horizon,
            sample_period,
        }
    }

    pub fn from_spec(spec: &ScenarioSpec, sys: &System) -> Result<Self, SimError> {
        let bad = |m: String| SimError::Scenario(m);
        let initial = match &spec.initial {
            InitialSpec::Equilibrium => InitialCondition::Equilibrium,
            InitialSpec::Explicit { components } => {
                let mut x = vec![f64::NAN; sys.nx()];
                for (id, values) in components {
                    let c = sys
                        .component_index(id)
                        .ok_or_else(|| bad(format!("unknown component `{id}`")))?;
                    let r = sys.component_range(c);
                    if values.len() != r.len() {
                        return Err(bad(format!(
                            "component `{id}` has {} states, got {}",
                            r.len(),
                            values.len()
                        )));
                    }
                    x[r].copy_from_slice(values);
                }
                if let Some(c) = (0..sys.components().len())
                    .find(|&c| x[sys.component_range(c)].iter().any(|v| v.is_nan()))
                {
                    return Err(bad(format!(
                        "no initial state for component `{}`",
                        sys.components()[c].id()
                    )));
                }
                InitialCondition::Explicit(x)
            }
        };
        let net = sys.network();
        let mut disturbances = Vec::new();
        for d in &spec.disturbances {
            disturbances.push(match d {
                DisturbanceSpec::StatePerturbation {
                    at,
                    component,
                    delta,
                } => {
                    let c = sys
                        .component_index(component)
                        .ok_or_else(|| bad(format!("unknown component `{component}`")))?;
                    let labels = sys.components()[c].state_labels();
                    let mut out = Vec::new();
                    for (label, v) in delta {
                        let i = labels.iter().position(|l| l == label).ok_or_else(|| {
                            bad(format!(
                                "component `{component}` has no state `{label}` (states: {})",
                                labels.join(", ")
                            ))
                        })?;
                        out.push((i, *v));
                    }
                    Disturbance::StatePerturbation {
                        at: *at,
                        component: c,
                        delta: out,
                    }
                }
                DisturbanceSpec::LoadStep {
                    at,
                    bus,
                    dp0,
                    dq0,
                    duration,
                } => Disturbance::LoadStep {
                    at: *at,
                    node: net
                        .node_of(bus)
                        .ok_or_else(|| bad(format!("unknown or ground bus `{bus}`")))?,
                    dp0: *dp0,
                    dq0: *dq0,
                    duration: *duration,
                },
                DisturbanceSpec::LineScale {
                    at,
                    branch,
                    factor,
                    duration,
                } => Disturbance::LineScale {
                    at: *at,
                    branch: net
                        .branch_index(branch)
                        .ok_or_else(|| bad(format!("unknown branch `{branch}`")))?,
                    factor: *factor,
                    duration: *duration,
                },
            });
        }
        let s = Self {
            initial,
            disturbances,
            horizon: spec.horizon,
            sample_period: spec.sample_period,
        };
        s.validate(sys)?;
        Ok(s)
    }

    pub fn validate(&self, sys: &System) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Scenario(m));
        if !(self.horizon >= 0.0) || !self.horizon.is_finite() {
            return bad(format!(
                "horizon {} must be a non-negative number",
                self.horizon
            ));
        }
        if !(self.sample_period > 0.0) || !self.sample_period.is_finite() {
            return bad(format!(
                "sample period {} must be positive",
                self.sample_period
            ));
        }
        for d in &self.disturbances {
            let at = d.at();
            if !(0.0..=self.horizon).contains(&at) {
                return bad(format!(
                    "disturbance time {at} lies outside [0, {}]",
                    self.horizon
                ));
            }
            match d {
                Disturbance::LineScale { factor, branch, .. } => {
                    if !(*factor > 0.0) || !factor.is_finite() {
                        return bad(format!("line scale factor {factor} must be positive"));
                    }
                    if !sys.network().lines().iter().any(|l| l.branch == *branch) {
                        return bad(format!(
                            "branch `{}` is not a line",
                            sys.network().branches()[*branch].id
                        ));
                    }
                }
                Disturbance::LoadStep { dp0, dq0, .. } => {
                    if !dp0.is_finite() || !dq0.is_finite() {
                        return bad("load step must be finite".into());
                    }
                }
                Disturbance::StatePerturbation { delta, .. } => {
                    if delta.iter().any(|(_, v)| !v.is_finite()) {
                        return bad("state perturbation must be finite".into());
                    }
                }
            }
            let duration = match d {
                Disturbance::LoadStep { duration, .. }
                | Disturbance::LineScale { duration, .. } => *duration,
                _ => None,
            };
            if let Some(dur) = duration {
                if !(dur > 0.0) || !dur.is_finite() {
                    return bad(format!("duration {dur} must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// One output sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub t: f64,
    pub bus: BusState,
    pub states: Vec<f64>,
    pub injections: Vec<ComplexPower>,
    /// `V_p(t) − V_p(0)`.
    pub vp: f64,
    pub vp_absolute: f64,
    pub w: f64,
    /// Cumulative jumps of `V_p` and `W` at events after the start.
    pub vp_jumps: f64,
    pub w_jumps: f64,
    /// `None` where the component's certificate is unavailable.
    pub storage: Vec<Option<f64>>,
    /// `Ẇ_i` by the chain rule.
    pub storage_rate: Vec<Option<f64>>,
    /// `ΔP θ̇ + ΔQ V̇/V`, printed convention.
    pub supply_printed: Vec<f64>,
    /// Running `∫ΔP dθ + ΔQ d ln V`.
    pub integral: Vec<f64>,
    /// Running `∫P dθ + Q d ln V`.
    pub integral_unshifted: Vec<f64>,
    /// `Σ∫P dθ + Q d ln V − (ΔV_p − jumps)`.
    pub theorem_residual: f64,
    /// `Σ∫ΔP dθ + ΔQ d ln V − (ΔW − jumps)`.
    pub lemma_residual: f64,
    pub algebraic_residual: f64,
    pub tellegen: f64,
    pub tellegen_relative: f64,
}

impl Sample {
    pub fn supply(&self, c: usize, convention: Convention) -> f64 {
        match convention {
            Convention::Printed => self.supply_printed[c],
            Convention::Negated => -self.supply_printed[c],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub bus_ids: Vec<String>,
    pub component_ids: Vec<String>,
    pub state_labels: Vec<Vec<&'static str>>,
    pub options: SimOptions,
    pub equilibrium_bus: BusState,
    pub equilibrium_states: Vec<f64>,
    pub equilibrium_injections: Vec<ComplexPower>,
    pub angle_invariant: bool,
    pub steps: usize,
    pub samples: Vec<Sample>,
}

impl Trajectory {
    pub fn max_theorem_residual(&self) -> f64 {
        self.samples
            .iter()
            .fold(0.0, |m, s| m.max(s.theorem_residual.abs()))
    }

    pub fn max_lemma_residual(&self) -> f64 {
        self.samples
            .iter()
            .fold(0.0, |m, s| m.max(s.lemma_residual.abs()))
    }

    pub fn max_algebraic_residual(&self) -> f64 {
        self.samples
            .iter()
            .fold(0.0, |m, s| m.max(s.algebraic_residual))
    }

    pub fn max_tellegen(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.tellegen))
    }

    /// Euclidean norm of bus angle and voltage deviations from the
    /// equilibrium, per sample. For rotation-invariant systems the mean angle
    /// offset is removed first.
    pub fn deviation_norms(&self) -> Vec<f64> {
        let eq = &self.equilibrium_bus;
        self.samples
            .iter()
            .map(|s| {
                let n = s.bus.len();
                let mut dth: Vec<f64> = (0..n).map(|i| s.bus.theta[i] - eq.theta[i]).collect();
                if self.angle_invariant && n > 0 {
                    let mean = dth.iter().sum::<f64>() / n as f64;
                    dth.iter_mut().for_each(|d| *d -= mean);
                }
                let dv = (0..n).map(|i| s.bus.v[i] - eq.v[i]);
                dth.iter()
                    .map(|d| d * d)
                    .chain(dv.map(|d| d * d))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        for b in &self.bus_ids {
            h.push(format!("{b}_V"));
            h.push(format!("{b}_theta"));
        }
        for (id, labels) in self.component_ids.iter().zip(&self.state_labels) {
            for l in labels {
                h.push(format!("{id}_{l}"));
            }
        }
        for id in &self.component_ids {
            h.push(format!("{id}_P"));
            h.push(format!("{id}_Q"));
        }
        h.push("Vp".into());
        h.push("W".into());
        for id in &self.component_ids {
            h.push(format!("{id}_storage"));
        }
        for id in &self.component_ids {
            h.push(format!("{id}_supply"));
        }
        for id in &self.component_ids {
            h.push(format!("{id}_integral"));
        }
        h
    }

    /// Trajectory as CSV, one row per sample. Floats use the shortest
    /// representation that round-trips.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{}", self.header().join(","))?;
        let nc = self.component_ids.len();
        let mut row = Vec::new();
        for s in &self.samples {
            row.clear();
            row.push(s.t);
            for i in 0..s.bus.len() {
                row.push(s.bus.v[i]);
                row.push(s.bus.theta[i]);
            }
            row.extend(&s.states);
            for u in &s.injections {
                row.push(u.active);
                row.push(u.reactive);
            }
            row.push(s.vp);
            row.push(s.w);
            row.extend(s.storage.iter().map(|v| v.unwrap_or(f64::NAN)));
            row.extend((0..nc).map(|c| s.supply(c, self.options.convention)));
            row.extend(&s.integral);
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("CSV is ASCII")
    }
}

/// Run metadata written next to a trajectory file.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub generator: String,
    pub case: Option<String>,
    pub options: SimOptions,
    /// Scenario as written in the case, with the effective horizon.
    pub scenario: Option<ScenarioSpec>,
    pub horizon: f64,
    pub sample_period: f64,
    pub samples: usize,
    pub steps: usize,
    pub columns: Vec<String>,
    pub max_theorem_residual: f64,
    pub max_lemma_residual: f64,
    pub max_algebraic_residual: f64,
    pub max_tellegen: f64,
}

impl RunManifest {
    pub fn new(
        case: Option<String>,
        spec: Option<&ScenarioSpec>,
        scenario: &Scenario,
        traj: &Trajectory,
    ) -> Self {
        Self {
            generator: format!("phasor-circuit {}", env!("CARGO_PKG_VERSION")),
            case,
            options: traj.options,
            scenario: spec.map(|s| ScenarioSpec {
                horizon: scenario.horizon,
                ..s.clone()
            }),
            horizon: scenario.horizon,
            sample_period: scenario.sample_period,
            samples: traj.samples.len(),
            steps: traj.steps,
            columns: traj.header(),
            max_theorem_residual: traj.max_theorem_residual(),
            max_lemma_residual: traj.max_lemma_residual(),
            max_algebraic_residual: traj.max_algebraic_residual(),
            max_tellegen: traj.max_tellegen(),
        }
    }
}

/// Differential and algebraic state at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Integration engine bound to one system and network.
pub struct Stepper<'a> {
    pub sys: &'a System,
    pub opts: SimOptions,
}

impl<'a> Stepper<'a> {
    pub fn new(sys: &'a System, opts: SimOptions) -> Self {
        Self { sys, opts }
    }

    fn solve_y(&self, t: f64, x: &[f64], y0: &[f64]) -> Result<Vec<f64>, SimError> {
        self.sys
            .solve_algebraic(x, y0, self.opts.algebraic_tol, self.opts.max_algebraic_iter)
            .map(|(y, _)| y)
            .map_err(|source| SimError::Algebraic { t, source })
    }

    fn rhs(&self, t: f64, x: &[f64], y0: &[f64]) -> Result<(Vec<f64>, Vec<f64>), SimError> {
        let y = self.solve_y(t, x, y0)?;
        let s = self.sys.bus_state(x, &y);
        let mut dx = vec![0.0; x.len()];
        self.sys.derivative_at(x, &s, &mut dx);
        Ok((dx, y))
    }

    fn check_positive(&self, t: f64, x: &[f64], y: &[f64]) -> Result<(), SimError> {
        let s = self.sys.bus_state(x, y);
        for (i, &v) in s.v.iter().enumerate() {
            if !(v > 0.0) {
                return Err(SimError::NonPositiveVoltage {
                    t,
                    bus: self.sys.network().node_id(i).to_string(),
                    v,
                });
            }
        }
        Ok(())
    }

    /// Makes the passive unknowns consistent with the component states.
    pub fn consistent(&self, t: f64, x: Vec<f64>, y0: &[f64]) -> Result<SystemState, SimError> {
        let y = self.solve_y(t, &x, y0)?;
        self.check_positive(t, &x, &y)?;
        Ok(SystemState { t, x, y })
    }

    pub fn step(&self, s: &SystemState, h: f64) -> Result<SystemState, SimError> {
        match self.opts.integrator {
            Integrator::Rk4 => self.step_rk4(s, h),
            Integrator::Trapezoidal => self.step_trapezoidal(s, h),
        }
    }

    fn step_rk4(&self, s: &SystemState, h: f64) -> Result<SystemState, SimError> {
        let t = s.t;
        let axpy =
            |a: f64, d: &[f64]| -> Vec<f64> { s.x.iter().zip(d).map(|(x, d)| x + a * d).collect() };
        let (k1, y1) = self.rhs(t, &s.x, &s.y)?;
        let (k2, y2) = self.rhs(t + 0.5 * h, &axpy(0.5 * h, &k1), &y1)?;
        let (k3, y3) = self.rhs(t + 0.5 * h, &axpy(0.5 * h, &k2), &y2)?;
        let (k4, y4) = self.rhs(t + h, &axpy(h, &k3), &y3)?;
        let x: Vec<f64> = (0..s.x.len())
            .map(|i| s.x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        self.consistent(t + h, x, &y4)
    }

    fn step_trapezoidal(&self, s: &SystemState, h: f64) -> Result<SystemState, SimError> {
        let sys = self.sys;
        let nx = sys.nx();
        let t1 = s.t + h;
        let z0: Vec<f64> = s.x.iter().chain(&s.y).copied().collect();
        let f0 = sys.residual(&z0);
        let g = |z: &[f64]| -> Vec<f64> {
            let f = sys.residual(z);
            let mut out = vec![0.0; z.len()];
            for i in 0..nx {
                out[i] = z[i] - z0[i] - 0.5 * h * (f0[i] + f[i]);
            }
            out[nx..].copy_from_slice(&f[nx..]);
            out
        };
        // Explicit Euler predictor.
        let mut z: Vec<f64> = z0
            .iter()
            .enumerate()
            .map(|(i, v)| if i < nx { v + h * f0[i] } else { *v })
            .collect();
        let mut r = g(&z);
        let mut norm = inf_norm(&r);
        let tol = self.opts.algebraic_tol;
        for _ in 0..self.opts.max_algebraic_iter {
            if norm <= tol {
                break;
            }
            let jf = sys.jacobian(&z);
            let m = z.len();
            let mut jg = DMatrix::zeros(m, m);
            for i in 0..m {
                for j in 0..m {
                    jg[(i, j)] = if i < nx {
                        (if i == j { 1.0 } else { 0.0 }) - 0.5 * h * jf[(i, j)]
                    } else {
                        jf[(i, j)]
                    };
                }
            }
            let dz = jg
                .lu()
                .solve(&-DVector::from_column_slice(&r))
                .ok_or(SimError::Implicit {
                    t: t1,
                    residual: norm,
                })?;
            for (a, d) in z.iter_mut().zip(dz.iter()) {
                *a += d;
            }
            r = g(&z);
            norm = inf_norm(&r);
        }
        if norm > tol {
            return Err(SimError::Implicit {
                t: t1,
                residual: norm,
            });
        }
        let (x, y) = z.split_at(nx);
        self.check_positive(t1, x, y)?;
        Ok(SystemState {
            t: t1,
            x: x.to_vec(),
            y: y.to_vec(),
        })
    }
}

enum Action {
    Perturb {
        component: usize,
        delta: Vec<(usize, f64)>,
    },
    Load {
        node: usize,
        dp0: f64,
        dq0: f64,
    },
    Scale {
        branch: usize,
        factor: f64,
    },
}

struct Event {
    step: usize,
    order: usize,
    action: Action,
}

fn schedule(scenario: &Scenario, h: f64, total: usize) -> Vec<Event> {
    let snap = |t: f64| ((t / h).round() as usize).min(total);
    let mut events = Vec::new();
    for (order, d) in scenario.disturbances.iter().enumerate() {
        match d {
            Disturbance::StatePerturbation {
                at,
                component,
                delta,
            } => events.push(Event {
                step: snap(*at),
                order,
                action: Action::Perturb {
                    component: *component,
                    delta: delta.clone(),
                },
            }),
            Disturbance::LoadStep {
                at,
                node,
                dp0,
                dq0,
                duration,
            } => {
                events.push(Event {
                    step: snap(*at),
                    order,
                    action: Action::Load {
                        node: *node,
                        dp0: *dp0,
                        dq0: *dq0,
                    },
                });
                if let Some(d) = duration {
                    let end = at + d;
                    if end <= scenario.horizon {
                        events.push(Event {
                            step: snap(end),
                            order,
                            action: Action::Load {
                                node: *node,
                                dp0: -dp0,
                                dq0: -dq0,
                            },
                        });
                    }
                }
            }
            Disturbance::LineScale {
                at,
                branch,
                factor,
                duration,
            } => {
                events.push(Event {
                    step: snap(*at),
                    order,
                    action: Action::Scale {
                        branch: *branch,
                        factor: *factor,
                    },
                });
                if let Some(d) = duration {
                    let end = at + d;
                    if end <= scenario.horizon {
                        events.push(Event {
                            step: snap(end),
                            order,
                            action: Action::Scale {
                                branch: *branch,
                                factor: 1.0 / factor,
                            },
                        });
                    }
                }
            }
        }
    }
    events.sort_by_key(|e| (e.step, e.order));
    events
}

/// Current network: base network with the active modifications applied in a
/// fixed order.
struct NetworkState {
    base: NetworkModel,
    loads: Vec<(usize, f64, f64)>,
    scales: Vec<(usize, f64)>,
}

impl NetworkState {
    fn build(&self) -> NetworkModel {
        let mut net = self.base.clone();
        for &(branch, f) in &self.scales {
            net = net
                .with_line_scaled(branch, f)
                .expect("validated line branch");
        }
        for &(node, p, q) in &self.loads {
            net = net.with_load_added(node, p, q);
        }
        net
    }
}

struct Diagnostics {
    ctx: PotentialContext,
    acc: PathIntegralAccumulator,
    vp0: f64,
    w0: f64,
    vp_jump: f64,
    w_jump: f64,
}

fn ports(sys: &System, st: &SystemState) -> Vec<PortSample> {
    let s = sys.bus_state(&st.x, &st.y);
    let u = sys.component_inputs(&s);
    (0..sys.components().len())
        .map(|c| {
            let node = sys.component_node(c);
            PortSample {
                theta: s.theta[node],
                v: s.v[node],
                p: u[c].active,
                q: u[c].reactive,
            }
        })
        .collect()
}

fn sample(sys: &System, st: &SystemState, d: &Diagnostics) -> Sample {
    let s = sys.bus_state(&st.x, &st.y);
    let u = sys.component_inputs(&s);
    let vp_abs = d.ctx.vp(&s);
    let w = d.ctx.w(&s);
    let mut storage = Vec::new();
    let mut storage_rate = Vec::new();
    let mut supply = Vec::new();
    for (c, comp) in sys.components().iter().enumerate() {
        let x = &st.x[sys.component_range(c)];
        storage.push(comp.storage(x).ok());
        storage_rate.push(comp.storage_rate(x, u[c]).ok());
        supply.push(comp.supply(x, u[c], Convention::Printed));
    }
    let n = sys.network().node_count();
    let mut generation = vec![ComplexPower::default(); n];
    for (c, g) in u.iter().enumerate() {
        generation[sys.component_node(c)] = *g;
    }
    let tg = tellegen_sum(
        sys.network(),
        &s,
        &branch_currents(sys.network(), &s, &generation),
    );
    Sample {
        t: st.t,
        algebraic_residual: inf_norm(&sys.passive_mismatch(&s)),
        bus: s,
        states: st.x.clone(),
        injections: u,
        vp: vp_abs - d.vp0,
        vp_absolute: vp_abs,
        w,
        vp_jumps: d.vp_jump,
        w_jumps: d.w_jump,
        storage,
        storage_rate,
        supply_printed: supply,
        integral: d.acc.shifted().to_vec(),
        integral_unshifted: d.acc.unshifted().to_vec(),
        theorem_residual: d.acc.total_unshifted() - (vp_abs - d.vp0 - d.vp_jump),
        lemma_residual: d.acc.total_shifted() - (w - d.w0 - d.w_jump),
        tellegen: tg.sum.norm(),
        tellegen_relative: tg.relative(),
    }
}

/// Simulates `scenario` on the solved system `eq.system`.
pub fn simulate(
    eq: &EquilibriumSolution,
    scenario: &Scenario,
    opts: &SimOptions,
) -> Result<Trajectory, SimError> {
    let base_sys = &eq.system;
    scenario.validate(base_sys)?;
    if !(opts.h > 0.0) || !opts.h.is_finite() {
        return Err(SimError::Scenario(format!(
            "step size {} must be positive",
            opts.h
        )));
    }
    let h = opts.h;
    let total = (scenario.horizon / h).round() as usize;
    let n_samples = (scenario.horizon / scenario.sample_period + 1e-9).floor() as usize + 1;
    let sample_steps: Vec<usize> = (0..n_samples)
        .map(|j| ((j as f64 * scenario.sample_period / h).round() as usize).min(total))
        .collect();
    if sample_steps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SimError::Scenario(format!(
            "sample period {} is shorter than the step size {h}",
            scenario.sample_period
        )));
    }
    let events = schedule(scenario, h, total);

    let mut netstate = NetworkState {
        base: base_sys.network().clone(),
        loads: Vec::new(),
        scales: Vec::new(),
    };
    let mut sys = base_sys.clone();
    let ctx = PotentialContext::new(base_sys.network().clone(), eq.bus.clone())
        .map_err(SystemError::from)?;

    let x0 = match &scenario.initial {
        InitialCondition::Equilibrium => eq.states.clone(),
        InitialCondition::Explicit(x) => {
            if x.len() != sys.nx() {
                return Err(SimError::Scenario(format!(
                    "initial state has {} entries, expected {}",
                    x.len(),
                    sys.nx()
                )));
            }
            x.clone()
        }
    };
    let mut diag = Diagnostics {
        ctx,
        acc: PathIntegralAccumulator::new(eq.injections()),
        vp0: 0.0,
        w0: 0.0,
        vp_jump: 0.0,
        w_jump: 0.0,
    };

    let mut state = Stepper::new(&sys, *opts).consistent(0.0, x0, &eq.passive)?;
    let mut ev = events.iter().peekable();

    let apply = |state: &mut SystemState,
                 sys: &mut System,
                 diag: &mut Diagnostics,
                 netstate: &mut NetworkState,
                 e: &Event|
     -> Result<(), SimError> {
        let before = sys.bus_state(&state.x, &state.y);
        let (vp_b, w_b) = (diag.ctx.vp(&before), diag.ctx.w(&before));
        match &e.action {
            Action::Perturb { component, delta } => {
                let r = sys.component_range(*component);
                for &(i, dv) in delta {
                    state.x[r.start + i] += dv;
                }
            }
            Action::Load { node, dp0, dq0 } => netstate.loads.push((*node, *dp0, *dq0)),
            Action::Scale { branch, factor } => netstate.scales.push((*branch, *factor)),
        }
        if !matches!(e.action, Action::Perturb { .. }) {
            let net = netstate.build();
            *sys = base_sys.with_network(net.clone());
            diag.ctx = diag.ctx.with_network(net);
        }
        let y0 = state.y.clone();
        *state = Stepper::new(sys, *opts).consistent(state.t, std::mem::take(&mut state.x), &y0)?;
        let after = sys.bus_state(&state.x, &state.y);
        diag.vp_jump += diag.ctx.vp(&after) - vp_b;
        diag.w_jump += diag.ctx.w(&after) - w_b;
        Ok(())
    };

    while let Some(e) = ev.next_if(|e| e.step == 0) {
        apply(&mut state, &mut sys, &mut diag, &mut netstate, e)?;
    }
    let s0 = sys.bus_state(&state.x, &state.y);
    diag.vp0 = diag.ctx.vp(&s0);
    diag.w0 = diag.ctx.w(&s0);
    diag.vp_jump = 0.0;
    diag.w_jump = 0.0;

    let mut samples = Vec::with_capacity(n_samples);
    let mut next_sample = 0;
    if sample_steps[0] == 0 {
        samples.push(sample(&sys, &state, &diag));
        next_sample = 1;
    }
    let mut prev_ports = ports(&sys, &state);
    for k in 0..total {
        let next = Stepper::new(&sys, *opts).step(&state, h)?;
        let t = (k + 1) as f64 * h;
        state = SystemState { t, ..next };
        let cur_ports = ports(&sys, &state);
        diag.acc.accumulate(&prev_ports, &cur_ports);
        prev_ports = cur_ports;
        let mut changed = false;
        while let Some(e) = ev.next_if(|e| e.step == k + 1) {
            apply(&mut state, &mut sys, &mut diag, &mut netstate, e)?;
            changed = true;
        }
        if changed {
            prev_ports = ports(&sys, &state);
        }
        if next_sample < n_samples && sample_steps[next_sample] == k + 1 {
            samples.push(sample(&sys, &state, &diag));
            next_sample += 1;
        }
    }

    Ok(Trajectory {
        bus_ids: eq.bus_ids.clone(),
        component_ids: base_sys
            .components()
            .iter()
            .map(|c| c.id().to_string())
            .collect(),
        state_labels: base_sys
            .components()
            .iter()
            .map(|c| c.state_labels().to_vec())
            .collect(),
        options: *opts,
        equilibrium_bus: eq.bus.clone(),
        equilibrium_states: eq.states.clone(),
        equilibrium_injections: eq.injections(),
        angle_invariant: base_sys.angle_invariant(),
        steps: total,
        samples,
    })
}

/// Solved case ready for simulation.
pub struct PreparedCase {
    pub equilibrium: EquilibriumSolution,
    pub scenario: Scenario,
    pub options: SimOptions,
}

/// Solves the equilibrium of a case and reads its scenario and solver
/// settings. Cases without a scenario get a quiet 10 s run.
pub fn prepare_case(desc: &NetworkFile, overrides: &SolverSpec) -> Result<PreparedCase, SimError> {
    let spec = desc.solver.clone().unwrap_or_default().overlay(overrides);
    let eq = solve_case(desc, &EquilibriumOptions::from_spec(&spec))?.solution;
    let scenario = match &desc.scenario {
        Some(s) => Scenario::from_spec(s, &eq.system)?,
        None => Scenario::quiet(10.0, 0.01),
    };
    Ok(PreparedCase {
        equilibrium: eq,
        scenario,
        options: SimOptions::from_spec(&spec),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdentityPoint {
    pub h: f64,
    pub theorem: f64,
    pub lemma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentitySweep {
    pub points: Vec<IdentityPoint>,
    pub theorem_order: f64,
    pub lemma_order: f64,
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_order(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Maximum identity residuals over the samples of one run per step size,
/// and the fitted convergence orders.
pub fn identity_sweep(
    eq: &EquilibriumSolution,
    scenario: &Scenario,
    opts: &SimOptions,
    hs: &[f64],
) -> Result<IdentitySweep, SimError> {
    let mut points = Vec::new();
    for &h in hs {
        let traj = simulate(eq, scenario, &SimOptions { h, ..*opts })?;
        points.push(IdentityPoint {
            h,
            theorem: traj.max_theorem_residual(),
            lemma: traj.max_lemma_residual(),
        });
    }
    let x: Vec<f64> = points.iter().map(|p| p.h).collect();
    let t: Vec<f64> = points.iter().map(|p| p.theorem).collect();
    let l: Vec<f64> = points.iter().map(|p| p.lemma).collect();
    Ok(IdentitySweep {
        theorem_order: fit_order(&x, &t),
        lemma_order: fit_order(&x, &l),
        points,
    })
}
