//! Stability certificate: convexity of the voltage potential at the
//! equilibrium combined with one of two per-component criteria.
//!
//! * Integral criterion: `∫ΔP dθ + ΔQ d ln V ≤ 0` along the trajectory.
//! * Storage criterion: `Ẇ_i − s_i ≤ 0` pointwise, with `Ẇ_i` from the chain
//!   rule and `s_i` the supply rate under a chosen sign convention.
//!
//! Every verdict carries the margin that produced it.

use crate::case::SolverSpec;
use crate::components::{
    local_certificate, Convention, DynamicComponent, LocalCertificate, LocalVerdict,
};
use crate::equilibrium::EquilibriumSolution;
use crate::potential::{
    ConvexityReport, Coordinates, PotentialContext, DEFAULT_POS_TOL, DEFAULT_ZERO_TOL,
};
use crate::simulator::Trajectory;
use serde::Serialize;
use std::fmt::Write as _;
use std::sync::Arc;

/// Default tolerance of the per-component criteria.
pub const DEFAULT_CRITERION_TOL: f64 = 1e-9;
/// Slack of the `W` cross-check in multiples of the identity residual.
pub const LEMMA_SLACK: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CertifyOptions {
    pub criterion_tol: f64,
    pub zero_tol: f64,
    pub pos_tol: f64,
    /// Convention used for the system-level conclusion.
    pub convention: Convention,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            criterion_tol: DEFAULT_CRITERION_TOL,
            zero_tol: DEFAULT_ZERO_TOL,
            pos_tol: DEFAULT_POS_TOL,
            convention: Convention::Negated,
        }
    }
}

impl CertifyOptions {
    pub fn from_spec(spec: &SolverSpec) -> Self {
        let d = Self::default();
        Self {
            criterion_tol: spec.criterion_tol.unwrap_or(d.criterion_tol),
            zero_tol: spec.zero_tol.unwrap_or(d.zero_tol),
            pos_tol: spec.pos_tol.unwrap_or(d.pos_tol),
            convention: spec
                .convention
                .map(Convention::from)
                .unwrap_or(d.convention),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegralCriterion {
    pub component: String,
    pub satisfied: bool,
    /// Largest running integral over the samples.
    pub max: f64,
    pub t_max: f64,
    pub tol: f64,
}

/// The integral criterion holds for a component when its running integral
/// stays at or below `tol` at every sample.
pub fn check_integral_criterion(traj: &Trajectory, tol: f64) -> Vec<IntegralCriterion> {
    traj.component_ids
        .iter()
        .enumerate()
        .map(|(c, id)| {
            let (max, t_max) = traj.samples.iter().map(|s| (s.integral[c], s.t)).fold(
                (f64::NEG_INFINITY, 0.0),
                |a, b| if b.0 > a.0 { b } else { a },
            );
            IntegralCriterion {
                component: id.clone(),
                satisfied: max <= tol,
                max,
                t_max,
                tol,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StorageOutcome {
    Evaluated {
        satisfied: bool,
        /// `min_t (s − Ẇ)`.
        margin: f64,
        t_min: f64,
    },
    CertificateUnavailable {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StorageCriterion {
    pub component: String,
    pub convention: Convention,
    pub tol: f64,
    pub outcome: StorageOutcome,
}

impl StorageCriterion {
    pub fn satisfied(&self) -> bool {
        matches!(
            self.outcome,
            StorageOutcome::Evaluated {
                satisfied: true,
                ..
            }
        )
    }

    pub fn margin(&self) -> Option<f64> {
        match self.outcome {
            StorageOutcome::Evaluated { margin, .. } => Some(margin),
            StorageOutcome::CertificateUnavailable { .. } => None,
        }
    }
}

/// The storage criterion holds for a component when `Ẇ − s ≤ tol` at every
/// sample.
pub fn check_storage_criterion(
    traj: &Trajectory,
    components: &[Arc<dyn DynamicComponent>],
    convention: Convention,
    tol: f64,
) -> Vec<StorageCriterion> {
    components
        .iter()
        .enumerate()
        .map(|(c, comp)| {
            let k = comp.certificate_gain();
            let outcome = if !(k > 0.0) {
                StorageOutcome::CertificateUnavailable {
                    reason: format!("certificate unavailable: k = {k} is not positive"),
                }
            } else {
                let mut worst = (f64::INFINITY, 0.0);
                let mut missing = None;
                for s in &traj.samples {
                    match s.storage_rate[c] {
                        Some(rate) => {
                            let m = s.supply(c, convention) - rate;
                            if !(m >= worst.0) {
                                worst = (m, s.t);
                            }
                        }
                        None => {
                            missing = Some(s.t);
                            break;
                        }
                    }
                }
                match missing {
                    Some(t) => StorageOutcome::CertificateUnavailable {
                        reason: format!(
                            "storage undefined at t = {t} (terminal voltage not positive)"
                        ),
                    },
                    None => StorageOutcome::Evaluated {
                        satisfied: -worst.0 <= tol,
                        margin: worst.0,
                        t_min: worst.1,
                    },
                }
            };
            StorageCriterion {
                component: comp.id().to_string(),
                convention,
                tol,
                outcome,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LocalEntry {
    Evaluated(LocalCertificate),
    CertificateUnavailable { component: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentReport {
    pub component: String,
    pub model: &'static str,
    pub local: LocalEntry,
    /// `None` without a trajectory.
    pub integral: Option<IntegralCriterion>,
    /// One entry per convention, empty without a trajectory.
    pub storage: Vec<StorageCriterion>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityResiduals {
    pub theorem: f64,
    pub lemma: f64,
    pub tellegen: f64,
    pub algebraic: f64,
}

/// Whether `W` stays below its initial value when all integral criteria
/// hold, allowing `LEMMA_SLACK` times the identity residual. Event jumps are
/// removed from `W` first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LemmaCrossCheck {
    /// False when some integral criterion fails; the check is then vacuous.
    pub applicable: bool,
    pub passed: bool,
    /// `max_t (W(t) − W(0))`.
    pub max_rise: f64,
    /// Largest increase between consecutive samples.
    pub max_step_rise: f64,
    pub slack: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Conclusion {
    /// Convexity member and every storage criterion holds.
    StableByStorageCriterion,
    /// Convexity member and every integral criterion holds, assuming the
    /// largest invariant set contains only equilibria.
    ConvergentByIntegralCriterion,
    NotEstablished,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateReport {
    pub options: CertifyOptions,
    /// Membership in `(θ, ln V)`; this verdict enters the conclusion.
    pub convexity: ConvexityReport,
    /// Same check in `(θ, V)`, reported for comparison.
    pub convexity_voltage: ConvexityReport,
    pub components: Vec<ComponentReport>,
    pub trajectory_evaluated: bool,
    pub identities: Option<IdentityResiduals>,
    pub lemma_check: Option<LemmaCrossCheck>,
    pub conclusion: Conclusion,
    pub notes: Vec<String>,
}

impl CertificateReport {
    pub fn integral_all_satisfied(&self) -> Option<bool> {
        self.trajectory_evaluated.then(|| {
            self.components
                .iter()
                .all(|c| c.integral.as_ref().is_some_and(|i| i.satisfied))
        })
    }

    pub fn storage_for(
        &self,
        component: usize,
        convention: Convention,
    ) -> Option<&StorageCriterion> {
        self.components[component]
            .storage
            .iter()
            .find(|s| s.convention == convention)
    }

    /// Human-readable summary.
    pub fn summary(&self) -> String {
        let mut o = String::new();
        let _ = writeln!(o, "convexity (theta, ln V): {:?}", self.convexity.verdict);
        let _ = writeln!(
            o,
            "  eigenvalues: {}",
            fmt_list(&self.convexity.eigenvalues)
        );
        let _ = writeln!(o, "  {}", self.convexity.reason);
        let _ = writeln!(
            o,
            "convexity (theta, V): {:?}",
            self.convexity_voltage.verdict
        );
        let _ = writeln!(
            o,
            "  eigenvalues: {}",
            fmt_list(&self.convexity_voltage.eigenvalues)
        );
        for c in &self.components {
            let _ = writeln!(o, "component {} ({})", c.component, c.model);
            match &c.local {
                LocalEntry::Evaluated(l) => {
                    let _ = writeln!(o, "  k = {:.6}", l.k);
                    for cc in &l.conventions {
                        let _ = writeln!(
                            o,
                            "  local form, {} convention: {:?} (max eigenvalue {:.3e})",
                            cc.convention, cc.verdict, cc.max_eigenvalue
                        );
                    }
                }
                LocalEntry::CertificateUnavailable { reason, .. } => {
                    let _ = writeln!(o, "  local form: {reason}");
                }
            }
            match &c.integral {
                Some(i) => {
                    let _ = writeln!(
                        o,
                        "  integral criterion: {} (max {:.3e} at t = {:.3}, tol {:e})",
                        verdict(i.satisfied),
                        i.max,
                        i.t_max,
                        i.tol
                    );
                }
                None => {
                    let _ = writeln!(o, "  integral criterion: not evaluated");
                }
            }
            if c.storage.is_empty() {
                let _ = writeln!(o, "  storage criterion: not evaluated");
            }
            for s in &c.storage {
                match &s.outcome {
                    StorageOutcome::Evaluated {
                        satisfied,
                        margin,
                        t_min,
                    } => {
                        let _ = writeln!(
                            o,
                            "  storage criterion, {} convention: {} (margin {:.3e} at t = {:.3}, tol {:e})",
                            s.convention,
                            verdict(*satisfied),
                            margin,
                            t_min,
                            s.tol
                        );
                    }
                    StorageOutcome::CertificateUnavailable { reason } => {
                        let _ = writeln!(
                            o,
                            "  storage criterion, {} convention: {reason}",
                            s.convention
                        );
                    }
                }
            }
        }
        if let Some(r) = &self.identities {
            let _ = writeln!(
                o,
                "identity residuals: energy balance {:.3e}, Bregman {:.3e}, Tellegen {:.3e}, algebraic {:.3e}",
                r.theorem, r.lemma, r.tellegen, r.algebraic
            );
        }
        if let Some(l) = &self.lemma_check {
            let _ = writeln!(
                o,
                "W cross-check: {} (max rise {:.3e}, slack {:.3e})",
                if l.applicable {
                    verdict(l.passed)
                } else {
                    "not applicable"
                },
                l.max_rise,
                l.slack
            );
        }
        let _ = writeln!(
            o,
            "conclusion: {}",
            match self.conclusion {
                Conclusion::StableByStorageCriterion => "stable by storage criterion",
                Conclusion::ConvergentByIntegralCriterion =>
                    "converges to the equilibrium set by integral criterion",
                Conclusion::NotEstablished => "stability not established",
            }
        );
        for n in &self.notes {
            let _ = writeln!(o, "note: {n}");
        }
        o
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "satisfied"
    } else {
        "violated"
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.6e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn lemma_check(traj: &Trajectory, applicable: bool) -> LemmaCrossCheck {
    let slack = LEMMA_SLACK * traj.max_lemma_residual();
    let w: Vec<f64> = traj.samples.iter().map(|s| s.w - s.w_jumps).collect();
    let w0 = w.first().copied().unwrap_or(0.0);
    let max_rise = w.iter().fold(0.0f64, |m, x| m.max(x - w0));
    let max_step_rise = w.windows(2).fold(0.0f64, |m, p| m.max(p[1] - p[0]));
    LemmaCrossCheck {
        applicable,
        passed: !applicable || max_rise <= slack,
        max_rise,
        max_step_rise,
        slack,
    }
}

/// Builds the certificate report for a solved system, optionally with a
/// trajectory of that system.
pub fn certify(
    eq: &EquilibriumSolution,
    traj: Option<&Trajectory>,
    opts: &CertifyOptions,
) -> CertificateReport {
    let sys = &eq.system;
    let mut notes = Vec::new();
    let (convexity, convexity_voltage) =
        match PotentialContext::new(sys.network().clone(), eq.bus.clone()) {
            Ok(ctx) => (
                ctx.convexity_check_in(Coordinates::LogVoltage, opts.zero_tol, opts.pos_tol),
                ctx.convexity_check_in(Coordinates::Voltage, opts.zero_tol, opts.pos_tol),
            ),
            Err(e) => unreachable!("solved equilibrium has positive voltages: {e}"),
        };

    let integral = traj.map(|t| check_integral_criterion(t, opts.criterion_tol));
    let storage: Vec<Vec<StorageCriterion>> = traj
        .map(|t| {
            Convention::BOTH
                .iter()
                .map(|&c| check_storage_criterion(t, sys.components(), c, opts.criterion_tol))
                .collect()
        })
        .unwrap_or_default();

    let components: Vec<ComponentReport> = sys
        .components()
        .iter()
        .enumerate()
        .map(|(i, comp)| ComponentReport {
            component: comp.id().to_string(),
            model: comp.model(),
            local: match local_certificate(comp.as_ref()) {
                Ok(l) => LocalEntry::Evaluated(l),
                Err(e) => LocalEntry::CertificateUnavailable {
                    component: comp.id().to_string(),
                    reason: e.to_string(),
                },
            },
            integral: integral.as_ref().map(|v| v[i].clone()),
            storage: storage.iter().map(|per| per[i].clone()).collect(),
        })
        .collect();

    let member = convexity.is_member();
    let storage_ok = components.iter().all(|c| match traj {
        Some(_) => c
            .storage
            .iter()
            .any(|s| s.convention == opts.convention && s.satisfied()),
        None => match &c.local {
            LocalEntry::Evaluated(l) => {
                l.for_convention(opts.convention).verdict != LocalVerdict::Fails
            }
            LocalEntry::CertificateUnavailable { .. } => false,
        },
    });
    if traj.is_none() {
        notes.push(
            "no trajectory: integral criterion not evaluated; storage criterion judged by the local form"
                .into(),
        );
    }
    let integral_ok = integral
        .as_ref()
        .is_some_and(|v| v.iter().all(|i| i.satisfied));
    let conclusion = if member && storage_ok {
        Conclusion::StableByStorageCriterion
    } else if member && integral_ok {
        Conclusion::ConvergentByIntegralCriterion
    } else {
        Conclusion::NotEstablished
    };
    if !member {
        notes.push(format!(
            "equilibrium is not a convexity member: {}",
            convexity.reason
        ));
    }
    notes.push(
        "assumed hypothesis: the largest invariant set where the supply vanishes contains only equilibria"
            .into(),
    );

    CertificateReport {
        options: *opts,
        convexity,
        convexity_voltage,
        components,
        trajectory_evaluated: traj.is_some(),
        identities: traj.map(|t| IdentityResiduals {
            theorem: t.max_theorem_residual(),
            lemma: t.max_lemma_residual(),
            tellegen: t.max_tellegen(),
            algebraic: t.max_algebraic_residual(),
        }),
        lemma_check: traj.map(|t| lemma_check(t, integral_ok)),
        conclusion,
        notes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::NetworkFile;
    use crate::simulator::{prepare_case, simulate, Scenario};
    use proptest::prelude::*;

    fn quiet(name: &str) -> (EquilibriumSolution, Trajectory) {
        let p = prepare_case(&NetworkFile::builtin(name).unwrap(), &SolverSpec::default()).unwrap();
        let t = simulate(&p.equilibrium, &Scenario::quiet(2.0, 0.1), &p.options).unwrap();
        (p.equilibrium, t)
    }

    #[test]
    fn equilibrium_trajectory_is_green_with_zero_margins() {
        let (eq, traj) = quiet("case3bus");
        for i in check_integral_criterion(&traj, 0.0) {
            assert!(i.satisfied);
            assert!(i.max.abs() < 1e-14);
        }
        for conv in Convention::BOTH {
            for s in check_storage_criterion(&traj, eq.system.components(), conv, 0.0) {
                assert!(s.margin().unwrap().abs() < 1e-14, "{s:?}");
            }
        }
    }

    #[test]
    fn energy_injecting_component_violates_at_first_sample() {
        let (_, mut traj) = quiet("toy2bus");
        // ΔP ≡ θ̇ ≡ 0.1 gives a running integral of 0.01·t.
        for s in traj.samples.iter_mut() {
            s.integral[0] = 0.01 * s.t;
        }
        let v = check_integral_criterion(&traj, 1e-9);
        assert!(!v[0].satisfied);
        let first = traj.samples.iter().find(|s| s.integral[0] > 1e-9).unwrap();
        assert!((first.t - 0.1).abs() < 1e-12);
    }

    #[test]
    fn report_without_trajectory() {
        let (eq, _) = quiet("case3bus");
        let r = certify(&eq, None, &CertifyOptions::default());
        assert!(!r.trajectory_evaluated);
        assert!(r
            .components
            .iter()
            .all(|c| c.integral.is_none() && c.storage.is_empty()));
        assert_eq!(r.convexity.eigenvalues.len(), 6);
        assert!(r.summary().contains("integral criterion: not evaluated"));
        assert!(r.identities.is_none());
    }

    #[test]
    fn report_is_deterministic() {
        let (eq, traj) = quiet("case3bus");
        let a =
            serde_json::to_string(&certify(&eq, Some(&traj), &CertifyOptions::default())).unwrap();
        let b =
            serde_json::to_string(&certify(&eq, Some(&traj), &CertifyOptions::default())).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unavailable_certificate_is_reported() {
        let desc: NetworkFile = serde_json::from_str(
            r#"{
            "buses": [
                {"id": "g", "kind": "ground"},
                {"id": "1", "kind": "dynamic", "component": "a"},
                {"id": "2", "kind": "passive"}
            ],
            "branches": [
                {"kind": "lossless_line", "id": "l", "from": "1", "to": "2", "x": 1.0},
                {"kind": "dynamic_shunt", "id": "s", "from": "1", "to": "g", "component": "a"},
                {"kind": "constant_power", "id": "d", "from": "2", "to": "g", "p0": 0.0, "q0": -0.3}
            ],
            "components": [
                {"model": "vsg", "id": "a", "bus": "1",
                 "params": {"m": 0.16, "dp": 0.076, "dq": 5.0, "tau_q": 0.3}}
            ],
            "operating_point": [
                {"bus": "1", "v": 1.0, "theta": 0.0},
                {"bus": "2", "v": 1.2416, "theta": 0.0}
            ]
        }"#,
        )
        .unwrap();
        let p = prepare_case(&desc, &SolverSpec::default()).unwrap();
        assert!(p.equilibrium.system.components()[0].certificate_gain() < 0.0);
        let traj = simulate(&p.equilibrium, &Scenario::quiet(0.1, 0.05), &p.options).unwrap();
        let r = certify(&p.equilibrium, Some(&traj), &CertifyOptions::default());
        assert!(matches!(
            r.components[0].local,
            LocalEntry::CertificateUnavailable { .. }
        ));
        assert!(r.components[0]
            .storage
            .iter()
            .all(|s| matches!(s.outcome, StorageOutcome::CertificateUnavailable { .. })));
        assert!(r.summary().contains("certificate unavailable"));
        assert_ne!(r.conclusion, Conclusion::StableByStorageCriterion);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn loosening_tolerance_never_flips_to_violated(
            values in proptest::collection::vec(-1.0f64..1.0, 1..30),
            tol in 0.0f64..0.5,
            extra in 0.0f64..0.5,
        ) {
            let (eq, mut traj) = quiet("toy2bus");
            traj.samples.truncate(values.len().min(traj.samples.len()));
            for (s, v) in traj.samples.iter_mut().zip(&values) {
                s.integral[0] = *v;
                s.supply_printed[0] = *v;
            }
            let tight = check_integral_criterion(&traj, tol);
            let loose = check_integral_criterion(&traj, tol + extra);
            prop_assert!(!tight[0].satisfied || loose[0].satisfied);
            for conv in Convention::BOTH {
                let tight = check_storage_criterion(&traj, eq.system.components(), conv, tol);
                let loose = check_storage_criterion(&traj, eq.system.components(), conv, tol + extra);
                prop_assert!(!tight[0].satisfied() || loose[0].satisfied());
            }
        }
    }
}
