//! JSON case-file schema.
//!
//! A case file describes the network, the dynamic components attached to it
//! and, optionally, an operating point to back-solve setpoints from, a
//! transient scenario and solver settings. Unknown fields are rejected.
//!
//! ```json
//! {
//!   "name": "example",
//!   "buses": [ {"id": "0", "kind": "ground"},
//!              {"id": "1", "kind": "dynamic", "component": "G1"},
//!              {"id": "2", "kind": "passive"} ],
//!   "branches": [
//!     {"kind": "lossless_line", "id": "L12", "from": "1", "to": "2", "x": 0.1},
//!     {"kind": "constant_power", "id": "P2", "from": "2", "to": "0", "p0": 0.1, "q0": 0.0},
//!     {"kind": "dynamic_shunt", "id": "S1", "from": "1", "to": "0", "component": "G1"} ],
//!   "components": [
//!     {"model": "vsg", "id": "G1", "bus": "1",
//!      "params": {"m": 0.16, "dp": 0.076, "dq": 0.03, "tau_q": 0.3}} ]
//! }
//! ```
//!
//! Constant-power `p0`/`q0` are consumption-positive.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{origin}: {source}")]
    Parse {
        origin: String,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKindSpec {
    Ground,
    Dynamic,
    Passive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusSpec {
    pub id: String,
    pub kind: BusKindSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BranchSpec {
    LosslessLine {
        id: String,
        from: String,
        to: String,
        x: f64,
        /// Parsed for the contour experiment only; must be zero in a network.
        #[serde(default)]
        g: f64,
    },
    ConstantPower {
        id: String,
        from: String,
        to: String,
        p0: f64,
        q0: f64,
    },
    DynamicShunt {
        id: String,
        from: String,
        to: String,
        component: String,
    },
}

impl BranchSpec {
    pub fn endpoints(&self) -> (&str, &str, &str) {
        match self {
            BranchSpec::LosslessLine { id, from, to, .. }
            | BranchSpec::ConstantPower { id, from, to, .. }
            | BranchSpec::DynamicShunt { id, from, to, .. } => (id, from, to),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetpointSpec {
    pub p: f64,
    pub q: f64,
    pub v: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VsgParams {
    pub m: f64,
    pub dp: f64,
    pub dq: f64,
    pub tau_q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DroopParams {
    pub tau_p: f64,
    pub tau_q: f64,
    pub dp: f64,
    pub dq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum ComponentSpec {
    Vsg {
        id: String,
        bus: String,
        params: VsgParams,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        setpoints: Option<SetpointSpec>,
    },
    Droop {
        id: String,
        bus: String,
        params: DroopParams,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        setpoints: Option<SetpointSpec>,
    },
}

impl ComponentSpec {
    pub fn id(&self) -> &str {
        match self {
            ComponentSpec::Vsg { id, .. } | ComponentSpec::Droop { id, .. } => id,
        }
    }

    pub fn bus(&self) -> &str {
        match self {
            ComponentSpec::Vsg { bus, .. } | ComponentSpec::Droop { bus, .. } => bus,
        }
    }

    pub fn setpoints(&self) -> Option<SetpointSpec> {
        match self {
            ComponentSpec::Vsg { setpoints, .. } | ComponentSpec::Droop { setpoints, .. } => {
                *setpoints
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatingPoint {
    pub bus: String,
    pub v: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    #[default]
    Equilibrium,
    /// Component states by component id; passive buses are solved from the
    /// algebraic constraints.
    Explicit {
        components: BTreeMap<String, Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DisturbanceSpec {
    StatePerturbation {
        at: f64,
        component: String,
        /// State label to additive offset, e.g. `{"omega": 0.1}`.
        delta: BTreeMap<String, f64>,
    },
    LoadStep {
        at: f64,
        bus: String,
        dp0: f64,
        dq0: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duration: Option<f64>,
    },
    LineScale {
        at: f64,
        branch: String,
        factor: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duration: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub disturbances: Vec<DisturbanceSpec>,
    pub horizon: f64,
    pub sample_period: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorSpec {
    #[default]
    Rk4,
    Trapezoidal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConventionSpec {
    Printed,
    #[default]
    Negated,
}

/// Solver settings; every field is optional and falls back to the library
/// defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub newton_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algebraic_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator: Option<IntegratorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convention: Option<ConventionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criterion_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos_tol: Option<f64>,
}

impl SolverSpec {
    /// Fields set in `other` take precedence.
    pub fn overlay(&self, other: &SolverSpec) -> SolverSpec {
        SolverSpec {
            newton_tol: other.newton_tol.or(self.newton_tol),
            max_iter: other.max_iter.or(self.max_iter),
            algebraic_tol: other.algebraic_tol.or(self.algebraic_tol),
            consistency_tol: other.consistency_tol.or(self.consistency_tol),
            h: other.h.or(self.h),
            integrator: other.integrator.or(self.integrator),
            convention: other.convention.or(self.convention),
            criterion_tol: other.criterion_tol.or(self.criterion_tol),
            zero_tol: other.zero_tol.or(self.zero_tol),
            pos_tol: other.pos_tol.or(self.pos_tol),
        }
    }
}

/// Top-level case document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub buses: Vec<BusSpec>,
    pub branches: Vec<BranchSpec>,
    #[serde(default)]
    pub components: Vec<ComponentSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operating_point: Option<Vec<OperatingPoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverSpec>,
}

impl NetworkFile {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, CaseError> {
        serde_json::from_str(text).map_err(|source| CaseError::Parse {
            origin: origin.to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CaseError> {
        let text = std::fs::read_to_string(path).map_err(|source| CaseError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Packaged case by name (`case3bus`, `toy2bus`).
    pub fn builtin(name: &str) -> Option<Self> {
        let text = match name {
            "case3bus" => CASE_3BUS,
            "toy2bus" => TOY_2BUS,
            _ => return None,
        };
        Some(Self::from_json(text, name).expect("packaged case parses"))
    }
}

/// The 3-bus VSG / droop / constant-power case.
pub const CASE_3BUS: &str = include_str!("../cases/case3bus.json");
/// Two buses, one VSG with zero reactive setpoint feeding a constant-power
/// branch that supplies the line's reactive demand.
pub const TOY_2BUS: &str = include_str!("../cases/toy2bus.json");
