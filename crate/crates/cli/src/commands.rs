//! One function per subcommand. Every numeric step is a library call.

use std::fs;

use recourse_core::adapted::{lift, nonanticipativity_gap};
use recourse_core::generate::{ObjectiveFamily, OperatorFamily, SetFamily};
use recourse_core::io::{
    from_json_str, parse_certificate, parse_instance, parse_policy, serialize_instance, to_canonical_string,
    PolicySpec,
};
use recourse_core::optimality::{
    brute_force_solve, compare_formulations, kkt_residual_builtin, kkt_residual_explicit, penalty_solve,
    recover_multipliers, GridSpec, PenaltySettings,
};
use recourse_core::recourse::{restore_builtin, restore_relaxed, verify_recourse_constant, RecourseSampler};
use recourse_core::{
    generate, AdaptedVector, CertificateMode, Error, GeneratorSpec, KktReport, KktTolerances, LoadedInstance, Mode,
    MultiplierCertificate, ProblemInstanceFile,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{Command, Common, GenArgs, Method, ObjectiveArg, OperatorArg, SetsArg, SolveArgs};
use crate::report::Report;

/// Default acceptance tolerance of `check-adjoint`.
const ADJOINT_TOL: f64 = 1e-12;
/// Default feasibility tolerance of `restore`.
const RESTORE_TOL: f64 = 1e-8;

/// A failure that maps onto a process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, unreadable files, schema violations.
    Usage(String),
    /// The problem data admit no feasible point where one was needed.
    Infeasible(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 4,
            Failure::Infeasible(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Infeasible(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InfeasiblePoint(_)
            | Error::NodeInfeasible { .. }
            | Error::NodeSolveFailed { .. }
            | Error::EmptyGrid
            | Error::EmptySet => Failure::Infeasible(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

type Outcome = std::result::Result<Report, Failure>;

pub fn run(common: &Common, command: &Command) -> Outcome {
    if common.threads > 1 {
        log::info!("--threads {}: the library runs single-threaded, results are identical", common.threads);
    }
    match command {
        Command::Gen(args) => gen(common, args),
        Command::CheckJacobian { directions, steps } => check_jacobian(common, *directions, steps),
        Command::CheckAdjoint { trials } => check_adjoint(common, *trials),
        Command::Restore => restore(common),
        Command::EstimateC { samples, radius } => estimate_c(common, *samples, *radius),
        Command::VerifyKkt => verify_kkt(common),
        Command::Solve(args) => solve(common, args),
        Command::Compare { solve } => compare(common, *solve),
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("reports are plain data")
}

fn load(common: &Common) -> std::result::Result<LoadedInstance, Failure> {
    let path = common
        .instance
        .as_ref()
        .ok_or_else(|| Failure::Usage("this command needs --instance".into()))?;
    let file = parse_instance(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    file.load().map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

// Policy from --policy, else the instance's stored candidate.
fn candidate(common: &Common, loaded: &LoadedInstance) -> std::result::Result<Option<AdaptedVector>, Failure> {
    match &common.policy {
        Some(path) => {
            let spec = parse_policy(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            let n = loaded.problem.n();
            if spec.dim != n {
                return Err(Failure::Usage(format!("{}: policy dim {} but n = {n}", path.display(), spec.dim)));
            }
            let v = spec
                .build(loaded.problem.tree(), "")
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            Ok(Some(v))
        }
        None => Ok(loaded.policy.clone()),
    }
}

fn require_candidate(common: &Common, loaded: &LoadedInstance) -> std::result::Result<AdaptedVector, Failure> {
    candidate(common, loaded)?
        .ok_or_else(|| Failure::Usage("no candidate policy: pass --policy or store one in the instance".into()))
}

fn generator_spec(common: &Common, args: &GenArgs) -> std::result::Result<GeneratorSpec, Failure> {
    if let Some(path) = &args.spec {
        let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        return from_json_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())));
    }
    Ok(GeneratorSpec {
        seed: common.seed,
        stages: args.stages,
        // A single stage has no branching, whatever the default says.
        branching: if args.stages <= 1 { Vec::new() } else { args.branching.clone() },
        n: args.n,
        m: args.m,
        operator: match args.operator {
            OperatorArg::Affine => OperatorFamily::Affine,
            OperatorArg::Smooth => OperatorFamily::Smooth,
        },
        sets: match args.sets {
            SetsArg::Box => SetFamily::Box,
            SetsArg::Polyhedron => SetFamily::Polyhedron,
        },
        objective: match args.objective {
            ObjectiveArg::Quadratic => ObjectiveFamily::Quadratic,
            ObjectiveArg::Softplus => ObjectiveFamily::Softplus,
            ObjectiveArg::Cvar => ObjectiveFamily::Cvar { alpha: args.alpha },
        },
        recourse_friendly: !args.no_recourse,
        random_probabilities: args.random_probabilities,
    })
}

fn gen(common: &Common, args: &GenArgs) -> Outcome {
    let spec = generator_spec(common, args)?;
    let generated = generate(&spec)?;
    let file = generated.to_file();
    let mut report = Report::new("gen", spec.seed, common.threads);
    match &common.out {
        Some(path) => {
            serialize_instance(&file, path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            report.line("written", path.display());
        }
        None => print!("{}", to_canonical_string(&file)?),
    }
    let tree = generated.problem.tree();
    report.line("stages", tree.stages());
    report.line("scenarios", tree.num_scenarios());
    report.line("nodes", tree.num_nodes());
    report.details = json!({ "spec": to_value(&spec), "written": common.out });
    Ok(report)
}

fn check_jacobian(common: &Common, directions: usize, steps: &[f64]) -> Outcome {
    let loaded = load(common)?;
    let problem = &loaded.problem;
    let tree = problem.tree();
    let n = problem.n();
    let x = candidate(common, &loaded)?.unwrap_or_else(|| AdaptedVector::zeros(tree, Mode::Builtin, n));
    let dirs = AdaptedVector::random_batch(tree, x.mode(), n, 1.0, directions, common.seed);
    let check = problem.operator().fd_check_jacobian(tree, &x, &dirs, steps)?;
    let mut report = Report::new("check-jacobian", common.seed, common.threads);
    report.pass = match common.tol {
        Some(tol) => check.worst_tolerance_ratio * check.tolerance <= tol,
        None => check.pass,
    };
    report.line("directions", check.directions);
    report.line("smallest-step error", format!("{:.3e}", check.error_at_smallest_step));
    report.line("worst error / allowed", format!("{:.3e}", check.worst_tolerance_ratio));
    report.details = to_value(&check);
    Ok(report)
}

fn check_adjoint(common: &Common, trials: usize) -> Outcome {
    let loaded = load(common)?;
    let problem = &loaded.problem;
    let check = problem.operator().check_adjoint(problem.tree(), trials, common.seed)?;
    let tol = common.tol.unwrap_or(ADJOINT_TOL);
    let mut report = Report::new("check-adjoint", common.seed, common.threads);
    report.pass = check.max_error() <= tol;
    report.line("trials per layout", trials);
    report.line("max pairing error", format!("{:.3e} (tol {tol:e})", check.max_error()));
    let mut details = to_value(&check);
    details["max_error"] = json!(check.max_error());
    details["tolerance"] = json!(tol);
    report.details = details;
    Ok(report)
}

fn restore(common: &Common) -> Outcome {
    let loaded = load(common)?;
    let inst = &loaded.problem.constraints;
    let tree = &inst.tree;
    let u = require_candidate(common, &loaded)?;
    let rep = match u.mode() {
        Mode::Builtin => restore_builtin(inst, &u)?,
        Mode::Relaxed => restore_relaxed(inst, &u)?,
    };
    let restored = rep.restored();
    let gap = nonanticipativity_gap(tree, restored, inst.p)?;
    let tol = common.tol.unwrap_or(RESTORE_TOL);
    let mut report = Report::new("restore", common.seed, common.threads);
    report.pass = rep.bound_satisfied && rep.final_infeasibility <= tol && gap == 0.0;
    report.line("mode", format!("{:?}", rep.mode).to_lowercase());
    report.line("deviation", format!("{:.6e}", rep.total_deviation));
    report.line("bound", format!("{:.6e}", rep.bound));
    report.line("final infeasibility", format!("{:.3e} (tol {tol:e})", rep.final_infeasibility));
    report.line("max node ratio", format!("{:.4}", rep.max_node_ratio));
    let mut details = to_value(&rep);
    details["restored"] = to_value(&PolicySpec::from_policy(tree, restored));
    details["restored_gap"] = json!(gap);
    report.details = details;
    Ok(report)
}

fn estimate_c(common: &Common, samples: usize, radius: f64) -> Outcome {
    let loaded = load(common)?;
    let inst = &loaded.problem.constraints;
    if !(radius > 0.0) {
        return Err(Failure::Usage("--radius must be positive".into()));
    }
    let sampler = RecourseSampler {
        history_radius: radius,
        eta_radius: radius,
    };
    let v = verify_recourse_constant(inst, inst.recourse_c, sampler, samples, common.seed)?;
    let mut report = Report::new("estimate-C", common.seed, common.threads);
    report.pass = v.pass;
    report.line("declared C", v.declared_c);
    report.line("largest sampled ratio", format!("{:.6}", v.max_ratio));
    report.line("samples", format!("{} ({} already feasible, {} failed)", v.samples, v.trivial_samples, v.failures));
    report.line("region", format!("histories and targets in [-{radius}, {radius}]"));
    report.details = to_value(&v);
    Ok(report)
}

fn tolerances(common: &Common) -> KktTolerances {
    let mut tol = KktTolerances::default();
    if let Some(t) = common.tol {
        tol.stationarity = t;
    }
    tol
}

fn kkt_lines(report: &mut Report, label: &'static str, k: &KktReport) {
    let mut text = format!(
        "stationarity {:.3e}, normal cones {:.3e}/{:.3e}",
        k.stationarity, k.normal_cone_y, k.normal_cone_x
    );
    if k.mode == CertificateMode::Explicit {
        text.push_str(&format!(", kernel {:.3e}", k.kernel));
    }
    text.push_str(if k.pass { " [pass]" } else { " [fail]" });
    report.line(label, text);
}

fn verify_kkt(common: &Common) -> Outcome {
    let loaded = load(common)?;
    let problem = &loaded.problem;
    let tree = problem.tree();
    let x = require_candidate(common, &loaded)?;
    let cert: MultiplierCertificate = match &common.certificate {
        Some(path) => parse_certificate(path)
            .and_then(|c| c.build(tree, problem.n(), problem.operator().m(), ""))
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?,
        None => loaded
            .certificate
            .clone()
            .ok_or_else(|| Failure::Usage("no certificate: pass --certificate or store one in the instance".into()))?,
    };
    let tol = tolerances(common);
    let k = match cert.mode {
        CertificateMode::Builtin => {
            if x.mode() != Mode::Builtin {
                return Err(Failure::Usage("a builtin certificate needs a builtin policy".into()));
            }
            kkt_residual_builtin(problem, &x, &cert, &tol)?
        }
        CertificateMode::Explicit => kkt_residual_explicit(problem, &lift(tree, &x), &cert, &tol)?,
    };
    let mut report = Report::new("verify-kkt", common.seed, common.threads);
    report.pass = k.pass;
    kkt_lines(&mut report, "certificate", &k);
    report.details = to_value(&k);
    Ok(report)
}

fn solve(common: &Common, args: &SolveArgs) -> Outcome {
    let loaded = load(common)?;
    let problem = &loaded.problem;
    let tree = problem.tree();
    let mut report = Report::new("solve", common.seed, common.threads);
    let (x, value, stats) = match args.method {
        Method::BruteForce => {
            let s = brute_force_solve(problem, &GridSpec::default())?;
            let stats = json!({
                "method": "brute-force",
                "grid_points": s.grid_points,
                "feasible_points": s.feasible_points,
                "polish_evaluations": s.polish_evaluations,
            });
            (s.policy, s.value, stats)
        }
        Method::Penalty => {
            let settings = PenaltySettings {
                k: args.k,
                steps: args.steps,
                seed: common.seed,
                ..PenaltySettings::default()
            };
            let start = candidate(common, &loaded)?;
            let s = penalty_solve(problem, &settings, start.as_ref())?;
            if let Some(w) = &s.warning {
                log::warn!("{w}");
            }
            let stats = json!({
                "method": "penalty",
                "settings": to_value(&settings),
                "best_merit": s.best_merit,
                "steps_taken": s.steps_taken,
                "warning": s.warning,
            });
            (s.policy, s.value, stats)
        }
    };
    let recovery = recover_multipliers(problem, &x, CertificateMode::Builtin, &tolerances(common))?;
    report.pass = recovery.report.pass;
    report.line("objective", format!("{value:.12e}"));
    kkt_lines(&mut report, "recovered certificate", &recovery.report);
    if let Some(path) = &args.save {
        let file = ProblemInstanceFile::from_problem(problem, Some(&x), Some(&recovery.certificate));
        serialize_instance(&file, path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        report.line("saved", path.display());
    }
    report.details = json!({
        "objective": value,
        "policy": to_value(&PolicySpec::from_policy(tree, &x)),
        "solver": stats,
        "kkt": to_value(&recovery.report),
    });
    Ok(report)
}

fn compare(common: &Common, solve_first: bool) -> Outcome {
    let loaded = load(common)?;
    let problem = &loaded.problem;
    let x = if solve_first {
        brute_force_solve(problem, &GridSpec::default())?.policy
    } else {
        require_candidate(common, &loaded)?
    };
    if x.mode() != Mode::Builtin {
        return Err(Failure::Usage("compare starts from a builtin policy".into()));
    }
    let c = compare_formulations(problem, &x, &tolerances(common))?;
    let r = &c.report;
    let mut report = Report::new("compare", common.seed, common.threads);
    report.pass = r.builtin.pass && r.explicit.pass && r.reduced.pass;
    report.line("objective", format!("{:.12e}", r.objective_value));
    kkt_lines(&mut report, "builtin", &r.builtin);
    kkt_lines(&mut report, "explicit", &r.explicit);
    kkt_lines(&mut report, "reduced explicit", &r.reduced);
    report.line("reduced / explicit", format!("{:.3e}", r.reduction_ratio));
    let mut details = to_value(r);
    details["reduced_builtin_residual"] = json!(r.reduced.stationarity);
    details["policy"] = to_value(&PolicySpec::from_policy(problem.tree(), &x));
    report.details = details;
    Ok(report)
}
