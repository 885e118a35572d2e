//! `phasorctl`: equilibrium, simulation and certificate runs on case files.
//!
//! Exit codes: 0 success, 1 invalid input, 2 solver failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use clap::{Args, Parser, Subcommand, ValueEnum};
use phasor_circuit::case::{ConventionSpec, NetworkFile, SolverSpec};
use phasor_circuit::certify::{certify, CertifyOptions};
use phasor_circuit::equilibrium::{solve_case, EquilibriumError, EquilibriumOptions};
use phasor_circuit::network::NetworkError;
use phasor_circuit::potential::{
    chord_arc_contours, path_dependence_experiment, unit_square_contours,
};
use phasor_circuit::simulator::{
    identity_sweep, prepare_case, simulate, PreparedCase, RunManifest, Scenario, SimError,
    SimOptions,
};
use phasor_circuit::system::SystemError;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "phasorctl",
    version,
    about = "Phasor-circuit stability toolkit"
)]
struct Cli {
    /// JSON file with solver settings; overrides the case's `solver` section.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Verdict tolerance: criterion tolerance for `certify`, identity
    /// tolerance for `verify-identities`.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Supply-rate sign convention.
    #[arg(long, global = true, value_enum)]
    convention: Option<ConventionArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConventionArg {
    Printed,
    Negated,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the equilibrium and print it as JSON.
    Equilibrium {
        #[command(flatten)]
        case: CaseArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the case scenario and write the trajectory CSV.
    Simulate {
        #[command(flatten)]
        case: CaseArg,
        /// Integration step in seconds.
        #[arg(long)]
        h: Option<f64>,
        /// Simulated time in seconds.
        #[arg(long)]
        horizon: Option<f64>,
        /// CSV destination; the run manifest goes next to it as
        /// `<stem>.manifest.json`. Without it the CSV goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate convexity and the per-component criteria.
    Certify {
        #[command(flatten)]
        case: CaseArg,
        /// Simulate the case scenario and evaluate the trajectory criteria.
        #[arg(long)]
        with_trajectory: bool,
        /// Print the report as JSON instead of the text summary.
        #[arg(long)]
        json: bool,
        /// Write the JSON report to a file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Energy-balance, Bregman and Tellegen residuals over a step-size sweep.
    VerifyIdentities {
        #[command(flatten)]
        case: CaseArg,
        /// Comma-separated step sizes.
        #[arg(long, value_delimiter = ',', default_value = "4e-3,2e-3,1e-3")]
        h_sweep: Vec<f64>,
        /// Simulated time in seconds.
        #[arg(long, default_value_t = 10.0)]
        horizon: f64,
    },
    /// Compare `∫Ī*dV̄` over two contours with shared endpoints.
    PathExperiment {
        #[arg(long, default_value_t = 0.0)]
        g: f64,
        #[arg(long, default_value_t = 1.0)]
        b: f64,
        #[arg(long, value_enum, default_value = "square")]
        contours: ContourArg,
    },
}

#[derive(Args)]
struct CaseArg {
    /// Case file, or the name of a packaged case (`case3bus`, `toy2bus`).
    case: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum ContourArg {
    /// `0 → 1 → 1+j` against `0 → j → 1+j`.
    Square,
    /// Chord `1 → j` against the quarter arc.
    ChordArc,
}

/// Error with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    fn solver(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

fn system_failure(e: &SystemError) -> Failure {
    match e {
        SystemError::AlgebraicDiverged { .. } | SystemError::AlgebraicSingular => {
            Failure::solver(e.to_string())
        }
        _ => Failure::input(e.to_string()),
    }
}

fn equilibrium_failure(e: &EquilibriumError) -> Failure {
    match e {
        EquilibriumError::System(s) => system_failure(s),
        EquilibriumError::Network(NetworkError::NonPositiveVoltage { .. }) => {
            Failure::solver(e.to_string())
        }
        EquilibriumError::Network(_)
        | EquilibriumError::MissingOperatingPoint(_)
        | EquilibriumError::UnknownOperatingPointBus(_)
        | EquilibriumError::MissingSetpoints(_) => Failure::input(e.to_string()),
        EquilibriumError::NotConverged { .. }
        | EquilibriumError::Singular { .. }
        | EquilibriumError::NonPositiveVoltage { .. }
        | EquilibriumError::Inconsistent { .. } => Failure::solver(e.to_string()),
    }
}

fn sim_failure(e: &SimError) -> Failure {
    match e {
        SimError::Scenario(_) => Failure::input(e.to_string()),
        SimError::Equilibrium(q) => equilibrium_failure(q),
        SimError::System(s) => system_failure(s),
        SimError::Algebraic { .. }
        | SimError::Implicit { .. }
        | SimError::NonPositiveVoltage { .. } => Failure::solver(e.to_string()),
    }
}

fn load_case(arg: &str) -> Result<NetworkFile, Failure> {
    let path = Path::new(arg);
    if path.exists() {
        return NetworkFile::load(path).map_err(|e| Failure::input(e.to_string()));
    }
    NetworkFile::builtin(arg).ok_or_else(|| {
        Failure::input(format!(
            "`{arg}` is neither a readable file nor a packaged case (case3bus, toy2bus)"
        ))
    })
}

fn solver_overrides(cli: &Cli) -> Result<SolverSpec, Failure> {
    let mut spec = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::input(format!("cannot read `{}`: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::input(format!("{}: {e}", p.display())))?
        }
        None => SolverSpec::default(),
    };
    if let Some(c) = cli.convention {
        spec.convention = Some(match c {
            ConventionArg::Printed => ConventionSpec::Printed,
            ConventionArg::Negated => ConventionSpec::Negated,
        });
    }
    if let Some(t) = cli.tol {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Failure::input(format!(
                "--tol {t} must be a non-negative number"
            )));
        }
        spec.criterion_tol = Some(t);
    }
    Ok(spec)
}

/// Writes through a temporary file in the destination directory so a failed
/// run never leaves a partial file behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let io = |e: std::io::Error| Failure::input(format!("cannot write `{}`: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

fn spec_for(desc: &NetworkFile, overrides: &SolverSpec) -> SolverSpec {
    desc.solver.clone().unwrap_or_default().overlay(overrides)
}

fn prepare(desc: &NetworkFile, overrides: &SolverSpec) -> Result<PreparedCase, Failure> {
    prepare_case(desc, overrides).map_err(|e| sim_failure(&e))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let overrides = solver_overrides(cli)?;
    match &cli.command {
        Command::Equilibrium { case, out } => {
            let desc = load_case(&case.case)?;
            let opts = EquilibriumOptions::from_spec(&spec_for(&desc, &overrides));
            let sol = solve_case(&desc, &opts).map_err(|e| equilibrium_failure(&e))?;
            emit(out.as_deref(), &to_json(&sol.solution))
        }
        Command::Simulate {
            case,
            h,
            horizon,
            out,
        } => {
            let desc = load_case(&case.case)?;
            let p = prepare(&desc, &overrides)?;
            let options = SimOptions {
                h: h.unwrap_or(p.options.h),
                ..p.options
            };
            let scenario = Scenario {
                horizon: horizon.unwrap_or(p.scenario.horizon),
                ..p.scenario.clone()
            };
            let traj =
                simulate(&p.equilibrium, &scenario, &options).map_err(|e| sim_failure(&e))?;
            let csv = traj.to_csv_string();
            match out {
                Some(path) => {
                    let manifest = RunManifest::new(
                        desc.name.clone(),
                        desc.scenario.as_ref(),
                        &scenario,
                        &traj,
                    );
                    write_atomic(path, csv.as_bytes())?;
                    write_atomic(&manifest_path(path), to_json(&manifest).as_bytes())
                }
                None => emit(None, &csv),
            }
        }
        Command::Certify {
            case,
            with_trajectory,
            json,
            out,
        } => {
            let desc = load_case(&case.case)?;
            let p = prepare(&desc, &overrides)?;
            let opts = CertifyOptions::from_spec(&spec_for(&desc, &overrides));
            let traj = if *with_trajectory {
                Some(
                    simulate(&p.equilibrium, &p.scenario, &p.options)
                        .map_err(|e| sim_failure(&e))?,
                )
            } else {
                None
            };
            let report = certify(&p.equilibrium, traj.as_ref(), &opts);
            if let Some(path) = out {
                write_atomic(path, to_json(&report).as_bytes())?;
            }
            if *json {
                emit(None, &to_json(&report))
            } else {
                emit(None, &report.summary())
            }
        }
        Command::VerifyIdentities {
            case,
            h_sweep,
            horizon,
        } => {
            let desc = load_case(&case.case)?;
            let p = prepare(&desc, &overrides)?;
            verify_identities(&p, h_sweep, *horizon, cli.tol.unwrap_or(1e-6))
        }
        Command::PathExperiment { g, b, contours } => {
            let (ca, cb) = match contours {
                ContourArg::Square => unit_square_contours(),
                ContourArg::ChordArc => chord_arc_contours(),
            };
            let r = path_dependence_experiment(*g, *b, &ca, &cb)
                .map_err(|e| Failure::input(e.to_string()))?;
            emit(None, &to_json(&r))
        }
    }
}

fn manifest_path(csv: &Path) -> PathBuf {
    let stem = csv
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    csv.with_file_name(format!("{stem}.manifest.json"))
}

fn verify_identities(p: &PreparedCase, hs: &[f64], horizon: f64, tol: f64) -> Result<(), Failure> {
    if hs.len() < 2 || hs.iter().any(|h| !(*h > 0.0)) {
        return Err(Failure::input(
            "--h-sweep needs at least two positive step sizes",
        ));
    }
    let scenario = Scenario {
        horizon,
        ..p.scenario.clone()
    };
    let sweep =
        identity_sweep(&p.equilibrium, &scenario, &p.options, hs).map_err(|e| sim_failure(&e))?;
    let mut o = String::new();
    let _ = writeln!(
        o,
        "{:>10}  {:>14}  {:>14}  {:>14}",
        "h", "energy", "bregman", "tellegen"
    );
    for (i, pt) in sweep.points.iter().enumerate() {
        let traj = simulate(
            &p.equilibrium,
            &scenario,
            &SimOptions {
                h: pt.h,
                ..p.options
            },
        )
        .map_err(|e| sim_failure(&e))?;
        let _ = writeln!(
            o,
            "{:>10.3e}  {:>14.6e}  {:>14.6e}  {:>14.6e}",
            pt.h,
            pt.theorem,
            pt.lemma,
            traj.max_tellegen()
        );
        if i == sweep.points.len() - 1 {
            let _ = writeln!(
                o,
                "algebraic residual at h = {:e}: {:.3e}",
                pt.h,
                traj.max_algebraic_residual()
            );
        }
    }
    let _ = writeln!(
        o,
        "order: energy {:.3}, bregman {:.3}",
        sweep.theorem_order, sweep.lemma_order
    );
    let finest = sweep
        .points
        .iter()
        .min_by(|a, b| a.h.total_cmp(&b.h))
        .unwrap();
    let ok = finest.theorem <= tol && finest.lemma <= tol;
    let _ = writeln!(
        o,
        "identities at h = {:e}: {} (tol {tol:e})",
        finest.h,
        if ok { "hold" } else { "violated" }
    );
    let (sa, sb) = unit_square_contours();
    let (ca, cb) = chord_arc_contours();
    for (name, a, b) in [("unit square", &sa, &sb), ("chord/arc", &ca, &cb)] {
        for (g, bb) in [(0.0, 1.0), (1.0, 0.0)] {
            let r =
                path_dependence_experiment(g, bb, a, b).expect("packaged contours share endpoints");
            let _ = writeln!(
                o,
                "path experiment {name}, g = {g}, b = {bb}: re_diff {:.6e}, im_diff {:.6e}",
                r.re_diff, r.im_diff
            );
        }
    }
    print!("{o}");
    if ok {
        Ok(())
    } else {
        Err(Failure::solver("identity residuals exceed the tolerance"))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
