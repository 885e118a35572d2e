//! Dynamic components attached between a bus and ground.
//!
//! A component has a state vector that contains its terminal voltage
//! magnitude and angle plus any internal states, and is driven by the power
//! it generates into the network, `u = (P, Q)`. Each component also carries a
//! candidate storage function for the passivity-like certificate.
//!
//! Storage functions are normalized so that they vanish at the component's
//! equilibrium: the voltage term `(k/Dq)(V/V_e − ln V)` has its minimum
//! `(k/Dq)(1 − ln V_e)` subtracted.

use crate::case::{ConventionSpec, DroopParams, SetpointSpec, VsgParams};
use crate::phasor::ComplexPower;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComponentError {
    #[error("component `{id}`: parameter `{name}` must be positive, got {value}")]
    NonPositiveParameter {
        id: String,
        name: &'static str,
        value: f64,
    },
    #[error("component `{id}`: certificate unavailable, k = V_e + Dq·Q_e = {k} is not positive")]
    CertificateUnavailable { id: String, k: f64 },
    #[error("component `{id}`: terminal voltage {v} is not positive")]
    NonPositiveVoltage { id: String, v: f64 },
}

/// Operating setpoints `(P_e, Q_e, V_e, θ_e)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setpoints {
    pub p: f64,
    pub q: f64,
    pub v: f64,
    pub theta: f64,
}

impl Default for Setpoints {
    fn default() -> Self {
        Self {
            p: 0.0,
            q: 0.0,
            v: 1.0,
            theta: 0.0,
        }
    }
}

impl From<SetpointSpec> for Setpoints {
    fn from(s: SetpointSpec) -> Self {
        Self {
            p: s.p,
            q: s.q,
            v: s.v,
            theta: s.theta,
        }
    }
}

/// Sign of the supply rate used in the storage criterion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// `s = ΔP·θ̇ + ΔQ·V̇/V`
    Printed,
    /// `s = −(ΔP·θ̇ + ΔQ·V̇/V)`
    #[default]
    Negated,
}

impl Convention {
    pub const BOTH: [Convention; 2] = [Convention::Negated, Convention::Printed];
}

impl From<ConventionSpec> for Convention {
    fn from(c: ConventionSpec) -> Self {
        match c {
            ConventionSpec::Printed => Convention::Printed,
            ConventionSpec::Negated => Convention::Negated,
        }
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Convention::Printed => "printed",
            Convention::Negated => "negated",
        })
    }
}

pub fn supply_rate(
    dp: f64,
    dq: f64,
    theta_dot: f64,
    v: f64,
    v_dot: f64,
    convention: Convention,
) -> f64 {
    let s = dp * theta_dot + dq * v_dot / v;
    match convention {
        Convention::Printed => s,
        Convention::Negated => -s,
    }
}

/// Symmetric matrix `A` with `Ẇ − s ≈ δᵀAδ` near equilibrium, in the
/// deviation variables named by `labels` (states, then `P`, `Q`).
#[derive(Debug, Clone, PartialEq)]
pub struct RateForm {
    pub labels: Vec<String>,
    pub matrix: DMatrix<f64>,
}

pub trait DynamicComponent: fmt::Debug + Send + Sync {
    fn id(&self) -> &str;
    fn model(&self) -> &'static str;
    fn state_labels(&self) -> &'static [&'static str];
    fn dim(&self) -> usize {
        self.state_labels().len()
    }
    fn theta_index(&self) -> usize;
    fn v_index(&self) -> usize;
    fn setpoints(&self) -> Setpoints;
    fn with_setpoints(&self, setpoints: Setpoints) -> Arc<dyn DynamicComponent>;
    /// Parameter checks independent of the operating point.
    fn validate(&self) -> Result<(), ComponentError>;
    /// Whether `derivative` is invariant under a shift of the terminal angle.
    fn angle_invariant(&self) -> bool;
    /// State at the setpoints.
    fn equilibrium_state(&self) -> Vec<f64>;
    /// State with the given terminal values and internal states at rest.
    fn state_at_terminal(&self, v: f64, theta: f64) -> Vec<f64>;
    fn derivative(&self, x: &[f64], u: ComplexPower, out: &mut [f64]);
    /// `(∂f/∂x, ∂f/∂u)` with `u = (P, Q)`.
    fn jacobian(&self, x: &[f64], u: ComplexPower) -> (DMatrix<f64>, DMatrix<f64>);
    /// `k = V_e + Dq·Q_e`.
    fn certificate_gain(&self) -> f64;
    fn storage(&self, x: &[f64]) -> Result<f64, ComponentError>;
    fn storage_gradient(&self, x: &[f64]) -> Result<Vec<f64>, ComponentError>;
    fn rate_form(&self, convention: Convention) -> Result<RateForm, ComponentError>;

    /// `(V, θ)` at the terminal.
    fn terminal(&self, x: &[f64]) -> (f64, f64) {
        (x[self.v_index()], x[self.theta_index()])
    }

    /// `Ẇ = ∇W · f(x, u)`.
    fn storage_rate(&self, x: &[f64], u: ComplexPower) -> Result<f64, ComponentError> {
        let g = self.storage_gradient(x)?;
        let mut f = vec![0.0; self.dim()];
        self.derivative(x, u, &mut f);
        Ok(g.iter().zip(&f).map(|(a, b)| a * b).sum())
    }

    /// Supply rate evaluated from the component's own dynamics.
    fn supply(&self, x: &[f64], u: ComplexPower, convention: Convention) -> f64 {
        let sp = self.setpoints();
        let mut f = vec![0.0; self.dim()];
        self.derivative(x, u, &mut f);
        let (v, _) = self.terminal(x);
        supply_rate(
            u.active - sp.p,
            u.reactive - sp.q,
            f[self.theta_index()],
            v,
            f[self.v_index()],
            convention,
        )
    }
}

fn positive(id: &str, name: &'static str, value: f64) -> Result<(), ComponentError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(ComponentError::NonPositiveParameter {
            id: id.to_string(),
            name,
            value,
        })
    }
}

/// Normalized voltage storage term and its derivative in `V`.
fn voltage_storage(
    id: &str,
    k: f64,
    dq: f64,
    ve: f64,
    v: f64,
) -> Result<(f64, f64), ComponentError> {
    if k <= 0.0 {
        return Err(ComponentError::CertificateUnavailable {
            id: id.to_string(),
            k,
        });
    }
    if v <= 0.0 {
        return Err(ComponentError::NonPositiveVoltage {
            id: id.to_string(),
            v,
        });
    }
    let c = k / dq;
    // (V/V_e − ln V) − (1 − ln V_e) written around V_e to limit cancellation.
    let r = v / ve;
    let w = c * ((r - 1.0) - r.ln());
    Ok((w, c * (1.0 / ve - 1.0 / v)))
}

/// Voltage block of the rate form over `(V, Q)` deviations, evaluated at
/// `V = V_e`.
fn voltage_block(k: f64, dq: f64, tau_q: f64, ve: f64, convention: Convention) -> [[f64; 2]; 2] {
    let c = 1.0 / (tau_q * ve);
    let vv = -c * k / (dq * ve);
    match convention {
        Convention::Negated => {
            let vq = -c * (k / ve + 1.0) / 2.0;
            [[vv, vq], [vq, -c * dq]]
        }
        Convention::Printed => {
            let vq = c * (1.0 - k / ve) / 2.0;
            [[vv, vq], [vq, c * dq]]
        }
    }
}

/// Virtual synchronous generator, state `(θ, ω, V)`.
///
/// ```text
/// θ̇ = ω
/// M ω̇ = −Dp ω + P_e − P
/// τq V̇ = −(V − V_e) − Dq (Q − Q_e)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Vsg {
    pub id: String,
    pub params: VsgParams,
    pub setpoints: Setpoints,
}

impl Vsg {
    pub fn new(id: impl Into<String>, params: VsgParams, setpoints: Setpoints) -> Self {
        Self {
            id: id.into(),
            params,
            setpoints,
        }
    }
}

impl DynamicComponent for Vsg {
    fn id(&self) -> &str {
        &self.id
    }

    fn model(&self) -> &'static str {
        "vsg"
    }

    fn state_labels(&self) -> &'static [&'static str] {
        &["theta", "omega", "V"]
    }

    fn theta_index(&self) -> usize {
        0
    }

    fn v_index(&self) -> usize {
        2
    }

    fn setpoints(&self) -> Setpoints {
        self.setpoints
    }

    fn with_setpoints(&self, setpoints: Setpoints) -> Arc<dyn DynamicComponent> {
        Arc::new(Self {
            setpoints,
            ..self.clone()
        })
    }

    fn validate(&self) -> Result<(), ComponentError> {
        let p = &self.params;
        positive(&self.id, "m", p.m)?;
        positive(&self.id, "dp", p.dp)?;
        positive(&self.id, "dq", p.dq)?;
        positive(&self.id, "tau_q", p.tau_q)?;
        positive(&self.id, "v_e", self.setpoints.v)
    }

    fn angle_invariant(&self) -> bool {
        true
    }

    fn equilibrium_state(&self) -> Vec<f64> {
        vec![self.setpoints.theta, 0.0, self.setpoints.v]
    }

    fn state_at_terminal(&self, v: f64, theta: f64) -> Vec<f64> {
        vec![theta, 0.0, v]
    }

    fn derivative(&self, x: &[f64], u: ComplexPower, out: &mut [f64]) {
        let (p, sp) = (&self.params, &self.setpoints);
        let (omega, v) = (x[1], x[2]);
        out[0] = omega;
        out[1] = (-p.dp * omega + sp.p - u.active) / p.m;
        out[2] = (-(v - sp.v) - p.dq * (u.reactive - sp.q)) / p.tau_q;
    }

    fn jacobian(&self, _x: &[f64], _u: ComplexPower) -> (DMatrix<f64>, DMatrix<f64>) {
        let p = &self.params;
        let fx = DMatrix::from_row_slice(
            3,
            3,
            &[
                0.0,
                1.0,
                0.0, //
                0.0,
                -p.dp / p.m,
                0.0, //
                0.0,
                0.0,
                -1.0 / p.tau_q,
            ],
        );
        let fu = DMatrix::from_row_slice(
            3,
            2,
            &[
                0.0,
                0.0, //
                -1.0 / p.m,
                0.0, //
                0.0,
                -p.dq / p.tau_q,
            ],
        );
        (fx, fu)
    }

    fn certificate_gain(&self) -> f64 {
        self.setpoints.v + self.params.dq * self.setpoints.q
    }

    fn storage(&self, x: &[f64]) -> Result<f64, ComponentError> {
        let (wv, _) = voltage_storage(
            &self.id,
            self.certificate_gain(),
            self.params.dq,
            self.setpoints.v,
            x[2],
        )?;
        Ok(0.5 * self.params.m * x[1] * x[1] + wv)
    }

    fn storage_gradient(&self, x: &[f64]) -> Result<Vec<f64>, ComponentError> {
        let (_, dv) = voltage_storage(
            &self.id,
            self.certificate_gain(),
            self.params.dq,
            self.setpoints.v,
            x[2],
        )?;
        Ok(vec![0.0, self.params.m * x[1], dv])
    }

    fn rate_form(&self, convention: Convention) -> Result<RateForm, ComponentError> {
        let k = self.certificate_gain();
        if k <= 0.0 {
            return Err(ComponentError::CertificateUnavailable {
                id: self.id.clone(),
                k,
            });
        }
        let p = &self.params;
        // Order: θ, ω, V, P, Q.
        let mut a = DMatrix::zeros(5, 5);
        a[(1, 1)] = -p.dp;
        if convention == Convention::Printed {
            a[(1, 3)] = -1.0;
            a[(3, 1)] = -1.0;
        }
        let vb = voltage_block(k, p.dq, p.tau_q, self.setpoints.v, convention);
        a[(2, 2)] = vb[0][0];
        a[(2, 4)] = vb[0][1];
        a[(4, 2)] = vb[1][0];
        a[(4, 4)] = vb[1][1];
        Ok(RateForm {
            labels: ["theta", "omega", "V", "P", "Q"].map(String::from).to_vec(),
            matrix: a,
        })
    }
}

/// Droop-controlled inverter, state `(θ, V)`.
///
/// ```text
/// τp θ̇ = −(θ − θ_e) − Dp (P − P_e)
/// τq V̇ = −(V − V_e) − Dq (Q − Q_e)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Droop {
    pub id: String,
    pub params: DroopParams,
    pub setpoints: Setpoints,
}

impl Droop {
    pub fn new(id: impl Into<String>, params: DroopParams, setpoints: Setpoints) -> Self {
        Self {
            id: id.into(),
            params,
            setpoints,
        }
    }
}

impl DynamicComponent for Droop {
    fn id(&self) -> &str {
        &self.id
    }

    fn model(&self) -> &'static str {
        "droop"
    }

    fn state_labels(&self) -> &'static [&'static str] {
        &["theta", "V"]
    }

    fn theta_index(&self) -> usize {
        0
    }

    fn v_index(&self) -> usize {
        1
    }

    fn setpoints(&self) -> Setpoints {
        self.setpoints
    }

    fn with_setpoints(&self, setpoints: Setpoints) -> Arc<dyn DynamicComponent> {
        Arc::new(Self {
            setpoints,
            ..self.clone()
        })
    }

    fn validate(&self) -> Result<(), ComponentError> {
        let p = &self.params;
        positive(&self.id, "tau_p", p.tau_p)?;
        positive(&self.id, "tau_q", p.tau_q)?;
        positive(&self.id, "dp", p.dp)?;
        positive(&self.id, "dq", p.dq)?;
        positive(&self.id, "v_e", self.setpoints.v)
    }

    fn angle_invariant(&self) -> bool {
        false
    }

    fn equilibrium_state(&self) -> Vec<f64> {
        vec![self.setpoints.theta, self.setpoints.v]
    }

    fn state_at_terminal(&self, v: f64, theta: f64) -> Vec<f64> {
        vec![theta, v]
    }

    fn derivative(&self, x: &[f64], u: ComplexPower, out: &mut [f64]) {
        let (p, sp) = (&self.params, &self.setpoints);
        out[0] = (-(x[0] - sp.theta) - p.dp * (u.active - sp.p)) / p.tau_p;
        out[1] = (-(x[1] - sp.v) - p.dq * (u.reactive - sp.q)) / p.tau_q;
    }

    fn jacobian(&self, _x: &[f64], _u: ComplexPower) -> (DMatrix<f64>, DMatrix<f64>) {
        let p = &self.params;
        let fx = DMatrix::from_row_slice(2, 2, &[-1.0 / p.tau_p, 0.0, 0.0, -1.0 / p.tau_q]);
        let fu = DMatrix::from_row_slice(2, 2, &[-p.dp / p.tau_p, 0.0, 0.0, -p.dq / p.tau_q]);
        (fx, fu)
    }

    fn certificate_gain(&self) -> f64 {
        self.setpoints.v + self.params.dq * self.setpoints.q
    }

    fn storage(&self, x: &[f64]) -> Result<f64, ComponentError> {
        let (wv, _) = voltage_storage(
            &self.id,
            self.certificate_gain(),
            self.params.dq,
            self.setpoints.v,
            x[1],
        )?;
        let a = x[0] - self.setpoints.theta;
        Ok(a * a / (2.0 * self.params.dp) + wv)
    }

    fn storage_gradient(&self, x: &[f64]) -> Result<Vec<f64>, ComponentError> {
        let (_, dv) = voltage_storage(
            &self.id,
            self.certificate_gain(),
            self.params.dq,
            self.setpoints.v,
            x[1],
        )?;
        Ok(vec![(x[0] - self.setpoints.theta) / self.params.dp, dv])
    }

    fn rate_form(&self, convention: Convention) -> Result<RateForm, ComponentError> {
        let k = self.certificate_gain();
        if k <= 0.0 {
            return Err(ComponentError::CertificateUnavailable {
                id: self.id.clone(),
                k,
            });
        }
        let p = &self.params;
        // Order: θ, V, P, Q.
        let mut a = DMatrix::zeros(4, 4);
        a[(0, 0)] = -1.0 / (p.dp * p.tau_p);
        match convention {
            Convention::Negated => {
                a[(0, 2)] = -1.0 / p.tau_p;
                a[(2, 0)] = -1.0 / p.tau_p;
                a[(2, 2)] = -p.dp / p.tau_p;
            }
            Convention::Printed => {
                a[(2, 2)] = p.dp / p.tau_p;
            }
        }
        let vb = voltage_block(k, p.dq, p.tau_q, self.setpoints.v, convention);
        a[(1, 1)] = vb[0][0];
        a[(1, 3)] = vb[0][1];
        a[(3, 1)] = vb[1][0];
        a[(3, 3)] = vb[1][1];
        Ok(RateForm {
            labels: ["theta", "V", "P", "Q"].map(String::from).to_vec(),
            matrix: a,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalVerdict {
    Holds,
    HoldsMarginally,
    Fails,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConventionCertificate {
    pub convention: Convention,
    pub eigenvalues: Vec<f64>,
    pub max_eigenvalue: f64,
    pub verdict: LocalVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalCertificate {
    pub component: String,
    pub k: f64,
    pub labels: Vec<String>,
    pub conventions: Vec<ConventionCertificate>,
}

impl LocalCertificate {
    pub fn for_convention(&self, c: Convention) -> &ConventionCertificate {
        self.conventions
            .iter()
            .find(|x| x.convention == c)
            .expect("both conventions are evaluated")
    }
}

/// Relative size of a positive eigenvalue still reported as exact
/// semidefiniteness.
pub const RATE_FORM_ZERO_TOL: f64 = 1e-12;
/// Relative size of a positive eigenvalue reported as marginal.
pub const RATE_FORM_MARGINAL_TOL: f64 = 1e-8;

/// Definiteness of `Ẇ − s` near the component's equilibrium, for both sign
/// conventions. The criterion holds locally when the form is negative
/// semidefinite.
pub fn local_certificate(c: &dyn DynamicComponent) -> Result<LocalCertificate, ComponentError> {
    let mut conventions = Vec::new();
    let mut labels = Vec::new();
    for conv in Convention::BOTH {
        let form = c.rate_form(conv)?;
        let sym = (&form.matrix + form.matrix.transpose()) * 0.5;
        let mut eig: Vec<f64> = SymmetricEigen::new(sym)
            .eigenvalues
            .iter()
            .copied()
            .collect();
        eig.sort_by(|a, b| a.total_cmp(b));
        let scale = eig
            .iter()
            .fold(0.0f64, |m, l| m.max(l.abs()))
            .max(f64::MIN_POSITIVE);
        let max = *eig.last().unwrap_or(&0.0);
        let verdict = if max <= RATE_FORM_ZERO_TOL * scale {
            LocalVerdict::Holds
        } else if max <= RATE_FORM_MARGINAL_TOL * scale {
            LocalVerdict::HoldsMarginally
        } else {
            LocalVerdict::Fails
        };
        labels = form.labels;
        conventions.push(ConventionCertificate {
            convention: conv,
            eigenvalues: eig,
            max_eigenvalue: max,
            verdict,
        });
    }
    Ok(LocalCertificate {
        component: c.id().to_string(),
        k: c.certificate_gain(),
        labels,
        conventions,
    })
}
