//! Voltage potential, its Bregman divergence, and path integrals.
//!
//! All functions work in the coordinates `z = (θ_0..θ_n, ρ_0..ρ_n)` with
//! `ρ = ln V`. In these coordinates the differential of the potential is
//! `dV_p = Σ P_i dθ_i + Q_i dρ_i`, where `(P_i, Q_i)` is the power that the
//! shunt side of node `i` delivers into the lines, i.e. the network-side
//! injection plus the local constant-power consumption.
//!
//! ```text
//! V_p = Σ_lines ½B(V_i² + V_k² − 2 V_i V_k cos θ_ik) + Σ_loads (p⁰ θ + q⁰ ln V)
//! ```
//!
//! with `p⁰, q⁰` consumption-positive as stored in the network.

use crate::network::{power_injection, BusState, NetworkError, NetworkModel};
use crate::phasor::ComplexPower;
use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Default relative threshold for a zero Hessian eigenvalue.
pub const DEFAULT_ZERO_TOL: f64 = 1e-8;
/// Default absolute lower bound for the remaining eigenvalues.
pub const DEFAULT_POS_TOL: f64 = 1e-10;

pub fn eval_vp(net: &NetworkModel, s: &BusState) -> f64 {
    let mut vp = 0.0;
    for l in net.lines() {
        let (vi, vk) = (s.v[l.from], s.v[l.to]);
        let cos = (s.theta[l.from] - s.theta[l.to]).cos();
        vp += 0.5 * l.coupling * (vi * vi + vk * vk - 2.0 * vi * vk * cos);
    }
    for ld in net.loads() {
        vp += ld.p0 * s.theta[ld.node] + ld.q0 * s.v[ld.node].ln();
    }
    vp
}

/// Power delivered into the lines from the shunt side of every node.
pub fn shunt_side_power(net: &NetworkModel, s: &BusState) -> Vec<ComplexPower> {
    let mut inj = power_injection(net, s);
    for (i, p) in inj.iter_mut().enumerate() {
        let (p0, q0) = net.load_at(i);
        p.active += p0;
        p.reactive += q0;
    }
    inj
}

/// `∇V_p` in `(θ, ln V)` coordinates.
pub fn grad_vp(net: &NetworkModel, s: &BusState) -> Vec<f64> {
    let n = net.node_count();
    let mut g = vec![0.0; 2 * n];
    for (i, p) in shunt_side_power(net, s).iter().enumerate() {
        g[i] = p.active;
        g[n + i] = p.reactive;
    }
    g
}

/// `∇²V_p` in `(θ, ln V)` coordinates. Load terms are linear in these
/// coordinates and do not contribute.
pub fn hessian_vp(net: &NetworkModel, s: &BusState) -> DMatrix<f64> {
    let n = net.node_count();
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    for l in net.lines() {
        let b = l.coupling;
        for (i, k) in [(l.from, l.to), (l.to, l.from)] {
            let (vi, vk) = (s.v[i], s.v[k]);
            let (sin, cos) = (s.theta[i] - s.theta[k]).sin_cos();
            let a = b * vi * vk;
            h[(i, i)] += a * cos;
            h[(i, k)] -= a * cos;
            h[(i, n + i)] += a * sin;
            h[(i, n + k)] += a * sin;
            h[(n + i, i)] += a * sin;
            h[(n + k, i)] += a * sin;
            h[(n + i, n + i)] += b * (2.0 * vi * vi - vi * vk * cos);
            h[(n + i, n + k)] -= a * cos;
        }
    }
    h
}

/// Coordinates in which a Hessian is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coordinates {
    /// `(θ, ln V)`, the coordinates of the energy identities.
    LogVoltage,
    /// `(θ, V)`.
    Voltage,
}

impl Coordinates {
    pub const BOTH: [Coordinates; 2] = [Coordinates::LogVoltage, Coordinates::Voltage];
}

/// `∇²V_p` in `(θ, V)` coordinates, obtained from the log-voltage Hessian by
/// `H_V = D⁻¹(H_ρ − diag(0, ∂V_p/∂ρ))D⁻¹` with `D = diag(1, V)`.
pub fn hessian_vp_voltage(net: &NetworkModel, s: &BusState) -> DMatrix<f64> {
    let n = net.node_count();
    let mut h = hessian_vp(net, s);
    let g = grad_vp(net, s);
    for i in 0..n {
        h[(n + i, n + i)] -= g[n + i];
    }
    let d: Vec<f64> = (0..2 * n)
        .map(|j| if j < n { 1.0 } else { 1.0 / s.v[j - n] })
        .collect();
    for i in 0..2 * n {
        for j in 0..2 * n {
            h[(i, j)] *= d[i] * d[j];
        }
    }
    h
}

pub fn hessian_vp_in(net: &NetworkModel, s: &BusState, coords: Coordinates) -> DMatrix<f64> {
    match coords {
        Coordinates::LogVoltage => hessian_vp(net, s),
        Coordinates::Voltage => hessian_vp_voltage(net, s),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Potential evaluated around a reference state `z₀`.
///
/// The linear part of the divergence, `∇V_p(z₀)`, is frozen at construction
/// so that a later change of the network (load step, line scaling) changes
/// the potential but not the reference injections.
#[derive(Debug, Clone)]
pub struct PotentialContext {
    net: NetworkModel,
    anchor: BusState,
    anchor_z: Vec<f64>,
    anchor_grad: Vec<f64>,
}

impl PotentialContext {
    pub fn new(net: NetworkModel, anchor: BusState) -> Result<Self, NetworkError> {
        net.check_state(&anchor)?;
        let anchor_grad = grad_vp(&net, &anchor);
        let anchor_z = anchor.log_coordinates();
        Ok(Self {
            net,
            anchor,
            anchor_z,
            anchor_grad,
        })
    }

    pub fn network(&self) -> &NetworkModel {
        &self.net
    }

    pub fn anchor(&self) -> &BusState {
        &self.anchor
    }

    /// `∇V_p(z₀)` of the network the context was built with.
    pub fn anchor_gradient(&self) -> &[f64] {
        &self.anchor_grad
    }

    /// Same anchor and reference injections, different network.
    pub fn with_network(&self, net: NetworkModel) -> Self {
        Self {
            net,
            ..self.clone()
        }
    }

    pub fn vp(&self, s: &BusState) -> f64 {
        eval_vp(&self.net, s)
    }

    pub fn grad_vp(&self, s: &BusState) -> Vec<f64> {
        grad_vp(&self.net, s)
    }

    /// `W(z) = V_p(z) − V_p(z₀) − ∇V_p(z₀)·(z − z₀)`.
    pub fn w(&self, s: &BusState) -> f64 {
        let dz = sub(&s.log_coordinates(), &self.anchor_z);
        eval_vp(&self.net, s) - eval_vp(&self.net, &self.anchor) - dot(&self.anchor_grad, &dz)
    }

    pub fn grad_w(&self, s: &BusState) -> Vec<f64> {
        sub(&grad_vp(&self.net, s), &self.anchor_grad)
    }

    /// `∇²W(z₀)` in `(θ, ln V)`.
    pub fn hessian_w(&self) -> DMatrix<f64> {
        hessian_vp(&self.net, &self.anchor)
    }

    pub fn hessian_w_in(&self, coords: Coordinates) -> DMatrix<f64> {
        hessian_vp_in(&self.net, &self.anchor, coords)
    }

    /// Membership test on the `(θ, ln V)` Hessian.
    pub fn convexity_check(&self, zero_tol: f64, pos_tol: f64) -> ConvexityReport {
        self.convexity_check_in(Coordinates::LogVoltage, zero_tol, pos_tol)
    }

    pub fn convexity_check_in(
        &self,
        coords: Coordinates,
        zero_tol: f64,
        pos_tol: f64,
    ) -> ConvexityReport {
        let mut r = convexity_of(&self.hessian_w_in(coords), zero_tol, pos_tol);
        r.coordinates = coords;
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvexityVerdict {
    Member,
    /// More than one eigenvalue is numerically zero.
    Degenerate,
    NotMember,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub coordinates: Coordinates,
    pub verdict: ConvexityVerdict,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub near_zero: usize,
    /// Cosine between the near-zero eigenvector and the uniform angle shift.
    pub zero_mode_alignment: Option<f64>,
    pub smallest_nonzero: Option<f64>,
    pub zero_tol: f64,
    pub pos_tol: f64,
    pub reason: String,
}

impl ConvexityReport {
    pub fn is_member(&self) -> bool {
        self.verdict == ConvexityVerdict::Member
    }
}

/// Minimum cosine between the zero eigenvector and the uniform angle shift.
pub const ZERO_MODE_ALIGNMENT: f64 = 0.999;

pub fn convexity_of(hessian: &DMatrix<f64>, zero_tol: f64, pos_tol: f64) -> ConvexityReport {
    let m = hessian.nrows();
    let n = m / 2;
    let sym = (hessian + hessian.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let lmax = eigenvalues.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    let zero: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| eig.eigenvalues[i].abs() <= zero_tol * lmax)
        .collect();
    let mut report = ConvexityReport {
        coordinates: Coordinates::LogVoltage,
        verdict: ConvexityVerdict::NotMember,
        eigenvalues: eigenvalues.clone(),
        near_zero: zero.len(),
        zero_mode_alignment: None,
        smallest_nonzero: eigenvalues
            .iter()
            .copied()
            .filter(|l| l.abs() > zero_tol * lmax)
            .reduce(f64::min),
        zero_tol,
        pos_tol,
        reason: String::new(),
    };
    if zero.len() > 1 {
        report.verdict = ConvexityVerdict::Degenerate;
        report.reason = format!("{} eigenvalues are numerically zero", zero.len());
        return report;
    }
    let Some(&z) = zero.first() else {
        report.reason = "no zero eigenvalue for the angle-shift mode".into();
        return report;
    };
    let v = eig.eigenvectors.column(z);
    let norm = v.norm();
    let cos = if norm > 0.0 {
        v.rows(0, n).sum().abs() / ((n as f64).sqrt() * norm)
    } else {
        0.0
    };
    report.zero_mode_alignment = Some(cos);
    if cos < ZERO_MODE_ALIGNMENT {
        report.reason =
            format!("zero eigenvector is not the uniform angle shift (cosine {cos:.6})");
        return report;
    }
    if let Some(bad) = eigenvalues
        .iter()
        .enumerate()
        .filter(|&(i, _)| order[i] != z)
        .map(|(_, l)| *l)
        .find(|&l| l < pos_tol)
    {
        report.reason = format!("eigenvalue {bad:.6e} is below {pos_tol:e}");
        return report;
    }
    report.verdict = ConvexityVerdict::Member;
    report.reason = "single zero mode along the uniform angle shift".into();
    report
}

/// Port quantities of one dynamic component at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PortSample {
    pub theta: f64,
    pub v: f64,
    pub p: f64,
    pub q: f64,
}

/// Running `∫ΔP dθ + ΔQ d ln V` per component (shifted by reference
/// injections) and `∫P dθ + Q d ln V` (unshifted), trapezoidal in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathIntegralAccumulator {
    reference: Vec<ComplexPower>,
    shifted: Vec<f64>,
    unshifted: Vec<f64>,
}

impl PathIntegralAccumulator {
    pub fn new(reference: Vec<ComplexPower>) -> Self {
        let n = reference.len();
        Self {
            reference,
            shifted: vec![0.0; n],
            unshifted: vec![0.0; n],
        }
    }

    pub fn accumulate(&mut self, prev: &[PortSample], cur: &[PortSample]) {
        for (c, (a, b)) in prev.iter().zip(cur).enumerate() {
            let dth = b.theta - a.theta;
            let drho = (b.v / a.v).ln();
            let pm = 0.5 * (a.p + b.p);
            let qm = 0.5 * (a.q + b.q);
            let r = self.reference[c];
            self.unshifted[c] += pm * dth + qm * drho;
            self.shifted[c] += (pm - r.active) * dth + (qm - r.reactive) * drho;
        }
    }

    pub fn shifted(&self) -> &[f64] {
        &self.shifted
    }

    pub fn unshifted(&self) -> &[f64] {
        &self.unshifted
    }

    pub fn total_shifted(&self) -> f64 {
        self.shifted.iter().sum()
    }

    pub fn total_unshifted(&self) -> f64 {
        self.unshifted.iter().sum()
    }
}

/// Piece of a contour in the complex voltage plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Segment {
    Line {
        from: Complex64,
        to: Complex64,
    },
    Arc {
        center: Complex64,
        radius: f64,
        start: f64,
        end: f64,
    },
}

impl Segment {
    fn point(&self, s: f64) -> (Complex64, Complex64) {
        match *self {
            Segment::Line { from, to } => (from + (to - from) * s, to - from),
            Segment::Arc {
                center,
                radius,
                start,
                end,
            } => {
                let phi = start + (end - start) * s;
                let e = Complex64::from_polar(radius, phi);
                (center + e, Complex64::new(0.0, end - start) * e)
            }
        }
    }

    fn endpoints(&self) -> (Complex64, Complex64) {
        (self.point(0.0).0, self.point(1.0).0)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Contour {
    pub segments: Vec<Segment>,
}

impl Contour {
    pub fn polyline(points: &[Complex64]) -> Self {
        Self {
            segments: points
                .windows(2)
                .map(|w| Segment::Line {
                    from: w[0],
                    to: w[1],
                })
                .collect(),
        }
    }

    pub fn then(mut self, seg: Segment) -> Self {
        self.segments.push(seg);
        self
    }

    pub fn start(&self) -> Option<Complex64> {
        self.segments.first().map(|s| s.endpoints().0)
    }

    pub fn end(&self) -> Option<Complex64> {
        self.segments.last().map(|s| s.endpoints().1)
    }
}

const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

/// Panels per segment for the composite Gauss–Legendre rule.
pub const CONTOUR_PANELS: usize = 64;

/// `∫ Ī* dV̄` with `Ī = y V̄` along the contour.
pub fn contour_integral(y: Complex64, contour: &Contour) -> Complex64 {
    let mut total = Complex64::new(0.0, 0.0);
    for seg in &contour.segments {
        for k in 0..CONTOUR_PANELS {
            let (a, b) = (
                k as f64 / CONTOUR_PANELS as f64,
                (k + 1) as f64 / CONTOUR_PANELS as f64,
            );
            let half = 0.5 * (b - a);
            for (x, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
                let (v, dv) = seg.point(0.5 * (a + b) + half * x);
                total += (y * v).conj() * dv * (w * half);
            }
        }
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathExperiment {
    pub g: f64,
    pub b: f64,
    pub integral_a: Complex64,
    pub integral_b: Complex64,
    pub re_diff: f64,
    pub im_diff: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("contours do not share endpoints")]
pub struct EndpointMismatch;

/// Difference of `∫Ī*dV̄` between two contours with shared endpoints for a
/// branch of admittance `y = g + jb`.
pub fn path_dependence_experiment(
    g: f64,
    b: f64,
    contour_a: &Contour,
    contour_b: &Contour,
) -> Result<PathExperiment, EndpointMismatch> {
    let close = |p: Option<Complex64>, q: Option<Complex64>| match (p, q) {
        (Some(p), Some(q)) => (p - q).norm() <= 1e-12 * (1.0 + p.norm()),
        _ => false,
    };
    if !close(contour_a.start(), contour_b.start()) || !close(contour_a.end(), contour_b.end()) {
        return Err(EndpointMismatch);
    }
    let y = Complex64::new(g, b);
    let ia = contour_integral(y, contour_a);
    let ib = contour_integral(y, contour_b);
    let d = ia - ib;
    Ok(PathExperiment {
        g,
        b,
        integral_a: ia,
        integral_b: ib,
        re_diff: d.re,
        im_diff: d.im,
    })
}

/// `0 → 1 → 1+j` and `0 → j → 1+j`; together they enclose the unit square
/// counter-clockwise.
pub fn unit_square_contours() -> (Contour, Contour) {
    let c = |re, im| Complex64::new(re, im);
    (
        Contour::polyline(&[c(0.0, 0.0), c(1.0, 0.0), c(1.0, 1.0)]),
        Contour::polyline(&[c(0.0, 0.0), c(0.0, 1.0), c(1.0, 1.0)]),
    )
}

/// Straight chord `1 → j` against the quarter arc of the unit circle; the
/// enclosed area is `π/4 − 1/2`.
pub fn chord_arc_contours() -> (Contour, Contour) {
    let a = Contour::default().then(Segment::Arc {
        center: Complex64::new(0.0, 0.0),
        radius: 1.0,
        start: 0.0,
        end: std::f64::consts::FRAC_PI_2,
    });
    let b = Contour::polyline(&[Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)]);
    (a, b)
}
