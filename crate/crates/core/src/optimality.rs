//! Optimality systems: residual checkers, multiplier recovery, the
//! reduction from explicit to built-in multipliers, and two small solvers
//! that produce candidate points for the checkers.
//!
//! Built-in system, node-wise at stage `t`:
//! `ĝ_t + A_{t,t}^T ψ̂_t + E_t[Σ_{ℓ>t} A_{ℓ,t}^T ψ̂_ℓ] + n̂_t = 0`.
//!
//! Explicit system, scenario-wise:
//! `g̃_t + λ_t + Σ_{ℓ≥t} A_{ℓ,t}^T ψ̃_ℓ + ñ_t = 0` together with `E_t[λ_t] = 0`.
//!
//! All dual objects are densities with respect to the probability pairing,
//! so the conditional sums above are exactly what
//! [`CausalOperator::apply_adjoint`](crate::causal::CausalOperator::apply_adjoint)
//! returns in each mode.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapted::{
    conditional_expectation_builtin, lift, lp_norm, nonanticipativity_gap, slot_node, slot_prob, stage_norm,
    AdaptedVector, Mode, PNorm,
};
use crate::error::{Error, Result};
use crate::objective::SubgradientFamily;
use crate::penalty::{family_residuals, phi, phi_subgradient};
use crate::problem::Problem;
use crate::qp::{lstsq, null_space, solve_bounded, Equalities, QpFailure};
use crate::recourse::{restore_builtin, RecourseReport};
use crate::sets::{ConeGenerators, ConvexSet};
use crate::tree::ScenarioTree;

/// Which optimality system a certificate answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CertificateMode {
    Builtin,
    Explicit,
}

impl CertificateMode {
    pub fn layout(self) -> Mode {
        match self {
            CertificateMode::Builtin => Mode::Builtin,
            CertificateMode::Explicit => Mode::Relaxed,
        }
    }
}

/// Multipliers `(g, ψ, n)` and, for the explicit system, `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierCertificate {
    pub mode: CertificateMode,
    pub g: AdaptedVector,
    pub psi: AdaptedVector,
    pub n: AdaptedVector,
    pub lambda: Option<AdaptedVector>,
}

impl MultiplierCertificate {
    fn check_layout(&self, tree: &ScenarioTree, n: usize, m: usize) -> Result<()> {
        let layout = self.mode.layout();
        let shaped = |v: &AdaptedVector, dim: usize, name: &str| -> Result<()> {
            if v.mode() != layout {
                return Err(Error::ModeMismatch(format!("{name} is not in {layout:?} layout")));
            }
            if v.dim() != dim || v.num_stages() != tree.stages() {
                return Err(Error::DimensionMismatch {
                    context: "certificate component",
                    expected: dim,
                    found: v.dim(),
                });
            }
            Ok(())
        };
        shaped(&self.g, n, "g")?;
        shaped(&self.psi, m, "psi")?;
        shaped(&self.n, n, "n")?;
        match (self.mode, &self.lambda) {
            (CertificateMode::Builtin, Some(_)) => {
                Err(Error::ModeMismatch("builtin certificates carry no lambda".into()))
            }
            (CertificateMode::Explicit, None) => Err(Error::ModeMismatch("explicit certificate needs lambda".into())),
            (CertificateMode::Explicit, Some(l)) => shaped(l, n, "lambda"),
            (CertificateMode::Builtin, None) => Ok(()),
        }
    }
}

/// Absolute tolerances used by the checkers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktTolerances {
    pub feasibility: f64,
    pub stationarity: f64,
    pub normal_cone: f64,
    pub kernel: f64,
    /// Distance of `g` from the objective's subdifferential.
    pub subgradient: f64,
}

impl Default for KktTolerances {
    fn default() -> Self {
        Self {
            feasibility: 1e-8,
            stationarity: 1e-6,
            normal_cone: 1e-8,
            kernel: 1e-8,
            subgradient: 1e-8,
        }
    }
}

/// Infeasibility of the candidate point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub phi: f64,
    pub dist_x: f64,
    /// Nonanticipativity gap; zero for builtin points.
    pub gap: f64,
}

/// Residuals of one optimality system at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub mode: CertificateMode,
    /// `L_q` norm of the stationarity left side per stage, `q` dual to `p`.
    pub stationarity_by_stage: Vec<f64>,
    /// Sum of the stage residuals.
    pub stationarity: f64,
    /// Worst node-wise `dist(ψ, N_Y)` at the projection of `F(x̂)`.
    pub normal_cone_y: f64,
    /// Worst node-wise `dist(n, N_X)` at the projection of `x̂`.
    pub normal_cone_x: f64,
    /// Distance of `g` from the subdifferential description.
    pub subgradient: f64,
    /// `||E_t[λ_t]||` per stage; empty for builtin certificates.
    pub kernel_by_stage: Vec<f64>,
    pub kernel: f64,
    pub feasibility: Feasibility,
    pub tolerances: KktTolerances,
    pub pass: bool,
}

impl KktReport {
    /// Largest of the stationarity and kernel residuals.
    pub fn worst_residual(&self) -> f64 {
        self.stationarity.max(self.kernel)
    }
}

// `q = p / (p - 1)` stage norms; `p = 1` pairs with the sup over slots.
fn dual_stage_norm(tree: &ScenarioTree, v: &AdaptedVector, t: usize, p: PNorm) -> f64 {
    if p.value() == 1.0 {
        (0..v.slots(t))
            .map(|k| v.slot(t, k).iter().map(|a| a * a).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    } else {
        let q = PNorm::new(p.value() / (p.value() - 1.0)).expect("finite dual exponent");
        stage_norm(tree, v, t, q)
    }
}

fn feasibility(problem: &Problem, x: &AdaptedVector) -> Result<Feasibility> {
    let (phi_val, dist_x) = problem.constraints.infeasibility(x)?;
    let gap = match x.mode() {
        Mode::Builtin => 0.0,
        Mode::Relaxed => nonanticipativity_gap(problem.tree(), x, problem.p())?,
    };
    Ok(Feasibility {
        phi: phi_val,
        dist_x,
        gap,
    })
}

fn require_feasible(problem: &Problem, x: &AdaptedVector, tol: f64) -> Result<Feasibility> {
    let f = feasibility(problem, x)?;
    if f.phi > tol || f.dist_x > tol || f.gap > tol {
        return Err(Error::InfeasiblePoint(format!(
            "Φ = {:e}, dist(x, X) = {:e}, gap = {:e} (tolerance {tol:e})",
            f.phi, f.dist_x, f.gap
        )));
    }
    Ok(f)
}

fn require_policy(problem: &Problem, x: &AdaptedVector, mode: Mode) -> Result<()> {
    if x.mode() != mode {
        return Err(Error::ModeMismatch(format!("expected a {mode:?} policy")));
    }
    if x.dim() != problem.n() {
        return Err(Error::DimensionMismatch {
            context: "policy dimension",
            expected: problem.n(),
            found: x.dim(),
        });
    }
    Ok(())
}

/// Projections of `F(x̂)` onto `Y` and of `x̂` onto `X`, slot by slot.
///
/// Normal cones are evaluated at these points because a candidate that is
/// feasible only up to the tolerance can sit just outside a set.
fn anchor_points(problem: &Problem, x: &AdaptedVector) -> Result<(AdaptedVector, AdaptedVector)> {
    let tree = problem.tree();
    let image = problem.operator().evaluate(tree, x)?;
    let project = |v: &AdaptedVector, family: &crate::sets::DecomposableFamily| -> Result<AdaptedVector> {
        let mut out = v.clone();
        for t in 0..tree.stages() {
            for k in 0..v.slots(t) {
                let node = slot_node(tree, v.mode(), t, k);
                let pr = family.set(node).project(v.slot(t, k))?;
                out.slot_mut(t, k).copy_from_slice(&pr);
            }
        }
        Ok(out)
    };
    Ok((project(&image, problem.y_family())?, project(x, problem.x_family())?))
}

fn normal_cone_worst(
    tree: &ScenarioTree,
    anchors: &AdaptedVector,
    family: &crate::sets::DecomposableFamily,
    v: &AdaptedVector,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for t in 0..tree.stages() {
        for k in 0..v.slots(t) {
            let node = slot_node(tree, v.mode(), t, k);
            worst = worst.max(family.set(node).normal_cone_residual(anchors.slot(t, k), v.slot(t, k))?);
        }
    }
    Ok(worst)
}

// Rows are slot values scaled by `sqrt(slot probability)`, so the squared
// Euclidean norm of a flattened vector is its squared L2 norm.
fn flatten_weighted(tree: &ScenarioTree, v: &AdaptedVector) -> Vec<f64> {
    let mut out = Vec::new();
    for t in 0..tree.stages() {
        for k in 0..v.slots(t) {
            let w = slot_prob(tree, v.mode(), t, k).sqrt();
            out.extend(v.slot(t, k).iter().map(|a| w * a));
        }
    }
    out
}

/// Bounded linear least squares `min ||Σ θ_j c_j - b||²` over a box and
/// linear equalities, with a feasible `start`.
struct BoundedLsq {
    cols: Vec<Vec<f64>>,
    target: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    eq_rows: Vec<Vec<f64>>,
    eq_rhs: Vec<f64>,
    start: Vec<f64>,
}

impl BoundedLsq {
    fn matrix(&self) -> DMatrix<f64> {
        let rows = self.target.len();
        DMatrix::from_fn(rows, self.cols.len(), |i, j| self.cols[j][i])
    }

    fn residual_norm(&self, m: &DMatrix<f64>, theta: &DVector<f64>) -> f64 {
        (m * theta - DVector::from_column_slice(&self.target)).norm()
    }

    fn solve(&self) -> Vec<f64> {
        let k = self.cols.len();
        if k == 0 {
            return Vec::new();
        }
        let m = self.matrix();
        let b = DVector::from_column_slice(&self.target);
        let h = m.transpose() * &m;
        let f = -(m.transpose() * &b);
        let e = DMatrix::from_fn(self.eq_rows.len(), k, |i, j| self.eq_rows[i].get(j).copied().unwrap_or(0.0));
        let e_rhs = DVector::from_column_slice(&self.eq_rhs);
        let eq = (!self.eq_rows.is_empty()).then_some(Equalities {
            matrix: &e,
            rhs: &e_rhs,
        });
        let start = DVector::from_column_slice(&self.start);
        let theta = match solve_bounded(&h, &f, &self.lower, &self.upper, eq, start.clone()) {
            Ok(sol) => sol.x,
            Err(QpFailure::IterationLimit(x)) => {
                log::warn!("multiplier least squares hit the iteration limit");
                x
            }
            Err(QpFailure::Unbounded) => {
                log::warn!("multiplier least squares reported an unbounded ray");
                start
            }
        };
        let refined = self.refine(&m, &b, &e, &theta);
        match refined {
            Some(r) if self.residual_norm(&m, &r) < self.residual_norm(&m, &theta) => r.as_slice().to_vec(),
            _ => theta.as_slice().to_vec(),
        }
    }

    // Re-solves on the free coordinates with an SVD of the tall matrix
    // itself, which is more accurate than the normal equations.
    fn refine(&self, m: &DMatrix<f64>, b: &DVector<f64>, e: &DMatrix<f64>, theta: &DVector<f64>) -> Option<DVector<f64>> {
        let k = theta.len();
        let free: Vec<usize> = (0..k)
            .filter(|&j| {
                let scale = 1.0 + theta[j].abs();
                theta[j] - self.lower[j] > 1e-12 * scale && self.upper[j] - theta[j] > 1e-12 * scale
            })
            .collect();
        if free.is_empty() {
            return None;
        }
        let mf = m.select_columns(&free);
        let z = if e.nrows() > 0 {
            null_space(&e.select_columns(&free))
        } else {
            DMatrix::identity(free.len(), free.len())
        };
        if z.ncols() == 0 {
            return None;
        }
        let r = b - m * theta;
        let y = lstsq(&(&mf * &z), &r);
        let step = &z * y;
        let mut out = theta.clone();
        for (i, &j) in free.iter().enumerate() {
            out[j] += step[i];
            if out[j] < self.lower[j] || out[j] > self.upper[j] {
                return None;
            }
        }
        Some(out)
    }
}

/// Distance of `g` from the subdifferential family, measured like the
/// stationarity residual.
fn family_distance(tree: &ScenarioTree, fam: &SubgradientFamily, g: &AdaptedVector, p: PNorm) -> Result<f64> {
    if !fam.fixed.same_shape(g) {
        return Err(Error::ModeMismatch("g does not match the subdifferential layout".into()));
    }
    let theta = if fam.dirs.is_empty() {
        Vec::new()
    } else {
        let lsq = BoundedLsq {
            cols: fam.dirs.iter().map(|d| flatten_weighted(tree, d)).collect(),
            target: flatten_weighted(tree, &(g - &fam.fixed)),
            lower: fam.lower.clone(),
            upper: fam.upper.clone(),
            eq_rows: fam.eq_rows.clone(),
            eq_rhs: fam.eq_rhs.clone(),
            start: fam.start.clone(),
        };
        lsq.solve()
    };
    let diff = g - &fam.element(&theta);
    Ok((0..tree.stages()).map(|t| dual_stage_norm(tree, &diff, t, p)).sum())
}

/// Stationarity left side in the certificate's layout.
fn stationarity_vector(problem: &Problem, x: &AdaptedVector, cert: &MultiplierCertificate) -> Result<AdaptedVector> {
    let back = problem.operator().apply_adjoint(problem.tree(), x, &cert.psi)?;
    let mut r = &(&cert.g + &back) + &cert.n;
    if let Some(l) = &cert.lambda {
        r = &r + l;
    }
    Ok(r)
}

fn check(
    problem: &Problem,
    x: &AdaptedVector,
    cert: &MultiplierCertificate,
    tol: &KktTolerances,
    mode: CertificateMode,
) -> Result<KktReport> {
    let tree = problem.tree();
    if cert.mode != mode {
        return Err(Error::ModeMismatch(format!("expected a {mode:?} certificate")));
    }
    require_policy(problem, x, mode.layout())?;
    cert.check_layout(tree, problem.n(), problem.operator().m())?;
    let feas = require_feasible(problem, x, tol.feasibility)?;
    let p = problem.p();

    let r = stationarity_vector(problem, x, cert)?;
    let stationarity_by_stage: Vec<f64> = (0..tree.stages()).map(|t| dual_stage_norm(tree, &r, t, p)).collect();
    let stationarity = stationarity_by_stage.iter().sum();

    let (y_anchor, x_anchor) = anchor_points(problem, x)?;
    let normal_cone_y = normal_cone_worst(tree, &y_anchor, problem.y_family(), &cert.psi)?;
    let normal_cone_x = normal_cone_worst(tree, &x_anchor, problem.x_family(), &cert.n)?;

    let fam = problem.objective.subgradient_family(tree, x)?;
    let subgradient = family_distance(tree, &fam, &cert.g, p)?;

    let (kernel_by_stage, kernel) = match &cert.lambda {
        Some(l) => {
            let e = conditional_expectation_builtin(tree, l)?;
            let by: Vec<f64> = (0..tree.stages()).map(|t| dual_stage_norm(tree, &e, t, p)).collect();
            let total = by.iter().sum();
            (by, total)
        }
        None => (Vec::new(), 0.0),
    };

    let pass = stationarity <= tol.stationarity
        && normal_cone_y <= tol.normal_cone
        && normal_cone_x <= tol.normal_cone
        && subgradient <= tol.subgradient
        && kernel <= tol.kernel;
    Ok(KktReport {
        mode,
        stationarity_by_stage,
        stationarity,
        normal_cone_y,
        normal_cone_x,
        subgradient,
        kernel_by_stage,
        kernel,
        feasibility: feas,
        tolerances: *tol,
        pass,
    })
}

/// Checks a builtin certificate at a builtin point.
pub fn kkt_residual_builtin(
    problem: &Problem,
    x: &AdaptedVector,
    cert: &MultiplierCertificate,
    tol: &KktTolerances,
) -> Result<KktReport> {
    check(problem, x, cert, tol, CertificateMode::Builtin)
}

/// Checks an explicit certificate at a relaxed point with zero gap.
pub fn kkt_residual_explicit(
    problem: &Problem,
    x: &AdaptedVector,
    cert: &MultiplierCertificate,
    tol: &KktTolerances,
) -> Result<KktReport> {
    check(problem, x, cert, tol, CertificateMode::Explicit)
}

/// Stage-wise conditional expectations of `g̃`, `ψ̃` and `ñ`; `λ` is dropped.
pub fn reduce_multipliers(tree: &ScenarioTree, cert: &MultiplierCertificate) -> Result<MultiplierCertificate> {
    if cert.mode != CertificateMode::Explicit {
        return Err(Error::ModeMismatch("reduction needs an explicit certificate".into()));
    }
    Ok(MultiplierCertificate {
        mode: CertificateMode::Builtin,
        g: conditional_expectation_builtin(tree, &cert.g)?,
        psi: conditional_expectation_builtin(tree, &cert.psi)?,
        n: conditional_expectation_builtin(tree, &cert.n)?,
        lambda: None,
    })
}

/// [`reduce_multipliers`] after confirming the input passes its own check.
pub fn reduce_checked(
    problem: &Problem,
    x: &AdaptedVector,
    cert: &MultiplierCertificate,
    tol: &KktTolerances,
) -> Result<MultiplierCertificate> {
    let report = kkt_residual_explicit(problem, x, cert, tol)?;
    if !report.pass {
        return Err(Error::CertificateRejected(format!(
            "explicit certificate fails its check (stationarity {:e}, kernel {:e})",
            report.stationarity, report.kernel
        )));
    }
    reduce_multipliers(problem.tree(), cert)
}

/// Output of [`recover_multipliers`].
#[derive(Debug, Clone)]
pub struct Recovery {
    /// The least-squares witness, returned even when it fails.
    pub certificate: MultiplierCertificate,
    pub report: KktReport,
}

impl Recovery {
    pub fn found(&self) -> bool {
        self.report.pass
    }

    /// `Err(NoCertificate)` when the witness fails the check.
    pub fn into_result(self) -> Result<MultiplierCertificate> {
        if self.report.pass {
            Ok(self.certificate)
        } else {
            Err(Error::NoCertificate {
                residual: self.report.worst_residual(),
            })
        }
    }
}

enum Block {
    G,
    Psi,
    N,
    Lambda,
}

struct Column {
    block: Block,
    // Contribution to the multiplier itself (ψ in Y layout, others in X).
    value: AdaptedVector,
}

fn cone_columns(
    tree: &ScenarioTree,
    mode: Mode,
    dim: usize,
    t: usize,
    k: usize,
    cone: &ConeGenerators,
    block: fn() -> Block,
    cols: &mut Vec<Column>,
    lower: &mut Vec<f64>,
) {
    for (gens, lo) in [(&cone.nonneg, 0.0), (&cone.free, f64::NEG_INFINITY)] {
        for v in gens {
            let mut unit = AdaptedVector::zeros(tree, mode, dim);
            unit.slot_mut(t, k).copy_from_slice(v.as_slice());
            cols.push(Column { block: block(), value: unit });
            lower.push(lo);
        }
    }
}

/// Finds multipliers minimizing the stationarity residual.
///
/// `x` is builtin for [`CertificateMode::Builtin`] and relaxed (with zero
/// gap) for [`CertificateMode::Explicit`]. The result is a least-squares
/// witness; the optimality theorems give existence, not uniqueness, so no
/// canonical dual is claimed.
pub fn recover_multipliers(
    problem: &Problem,
    x: &AdaptedVector,
    mode: CertificateMode,
    tol: &KktTolerances,
) -> Result<Recovery> {
    let tree = problem.tree();
    let layout = mode.layout();
    require_policy(problem, x, layout)?;
    require_feasible(problem, x, tol.feasibility)?;
    let n = problem.n();
    let m = problem.operator().m();
    let (y_anchor, x_anchor) = anchor_points(problem, x)?;
    let fam = problem.objective.subgradient_family(tree, x)?;

    let mut cols: Vec<Column> = Vec::new();
    let mut lower: Vec<f64> = Vec::new();
    let mut upper: Vec<f64> = Vec::new();
    for (j, d) in fam.dirs.iter().enumerate() {
        cols.push(Column {
            block: Block::G,
            value: d.clone(),
        });
        lower.push(fam.lower[j]);
        upper.push(fam.upper[j]);
    }
    let n_g = cols.len();
    for t in 0..tree.stages() {
        for k in 0..x.slots(t) {
            let node = slot_node(tree, layout, t, k);
            let cone_y = problem.y_family().set(node).normal_cone(y_anchor.slot(t, k))?;
            cone_columns(tree, layout, m, t, k, &cone_y, || Block::Psi, &mut cols, &mut lower);
            let cone_x = problem.x_family().set(node).normal_cone(x_anchor.slot(t, k))?;
            cone_columns(tree, layout, n, t, k, &cone_x, || Block::N, &mut cols, &mut lower);
        }
    }
    if mode == CertificateMode::Explicit {
        // λ ∈ ker E_t: at each stage-t node the first scenario's value is
        // fixed by the others, λ(s_1) = -Σ_{j≥2} (p_j / p_1) λ(s_j).
        for t in 0..tree.stages() {
            for &node in tree.stage_nodes(t) {
                let below = tree.scenarios_below(node);
                let s1 = below[0];
                let p1 = tree.scenario_prob(s1);
                for &sj in &below[1..] {
                    let ratio = tree.scenario_prob(sj) / p1;
                    for i in 0..n {
                        let mut v = AdaptedVector::zeros(tree, layout, n);
                        v.slot_mut(t, sj)[i] = 1.0;
                        v.slot_mut(t, s1)[i] = -ratio;
                        cols.push(Column {
                            block: Block::Lambda,
                            value: v,
                        });
                        lower.push(f64::NEG_INFINITY);
                    }
                }
            }
        }
    }
    upper.resize(cols.len(), f64::INFINITY);

    // Effect of each parameter on the stationarity left side.
    let effects: Vec<Vec<f64>> = cols
        .iter()
        .map(|c| {
            let eff = match c.block {
                Block::Psi => problem.operator().apply_adjoint(tree, x, &c.value)?,
                _ => c.value.clone(),
            };
            Ok(flatten_weighted(tree, &eff))
        })
        .collect::<Result<_>>()?;
    let total = cols.len();
    let mut start = fam.start.clone();
    start.resize(total, 0.0);
    let eq_rows: Vec<Vec<f64>> = fam
        .eq_rows
        .iter()
        .map(|r| {
            let mut row = r.clone();
            row.resize(total, 0.0);
            row
        })
        .collect();
    let lsq = BoundedLsq {
        cols: effects,
        target: flatten_weighted(tree, &-&fam.fixed),
        lower,
        upper,
        eq_rows,
        eq_rhs: fam.eq_rhs.clone(),
        start,
    };
    let theta = lsq.solve();

    let g = fam.element(&theta[..n_g]);
    let mut psi = AdaptedVector::zeros(tree, layout, m);
    let mut nn = AdaptedVector::zeros(tree, layout, n);
    let mut lambda = AdaptedVector::zeros(tree, layout, n);
    for (c, th) in cols.iter().zip(&theta).skip(n_g) {
        if *th == 0.0 {
            continue;
        }
        match c.block {
            Block::Psi => psi.axpy(*th, &c.value),
            Block::N => nn.axpy(*th, &c.value),
            Block::Lambda => lambda.axpy(*th, &c.value),
            Block::G => unreachable!("g parameters come first"),
        }
    }
    let certificate = MultiplierCertificate {
        mode,
        g,
        psi,
        n: nn,
        lambda: (mode == CertificateMode::Explicit).then_some(lambda),
    };
    let report = check(problem, x, &certificate, tol, mode)?;
    if !report.pass {
        log::info!(
            "multiplier recovery: best stationarity residual {:e}, kernel {:e}",
            report.stationarity,
            report.kernel
        );
    }
    Ok(Recovery { certificate, report })
}

/// Search grid for [`brute_force_solve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Largest number of grid values per coordinate.
    pub points: usize,
    /// Cap on the total number of grid points.
    pub budget: usize,
    /// Coordinates without finite box bounds range over `[-radius, radius]`.
    pub radius: f64,
    /// Coordinate-descent step at which polishing stops.
    pub polish_tol: f64,
    /// Cap on objective evaluations during polishing.
    pub max_polish_evals: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points: 21,
            budget: 2048,
            radius: 5.0,
            polish_tol: 1e-10,
            max_polish_evals: 200_000,
        }
    }
}

/// Largest total decision dimension accepted by [`brute_force_solve`].
pub const BRUTE_FORCE_MAX_DIM: usize = 10;

#[derive(Debug, Clone)]
pub struct BruteForceSolution {
    pub policy: AdaptedVector,
    pub value: f64,
    pub grid_points: usize,
    pub feasible_points: usize,
    pub polish_evaluations: usize,
}

fn coordinate_range(set: &ConvexSet, i: usize, radius: f64) -> (f64, f64) {
    match set {
        ConvexSet::Box { lower, upper } => (lower[i].max(-radius), upper[i].min(radius)),
        ConvexSet::Singleton { point } => (point[i], point[i]),
        _ => (-radius, radius),
    }
}

// Restores `u` and returns the feasible point with its objective value,
// or `None` when restoration fails.
fn restored_value(problem: &Problem, u: &AdaptedVector) -> Option<(AdaptedVector, f64)> {
    let report = restore_builtin(&problem.constraints, u).ok()?;
    let x = report.restored.expect("restoration returns a policy");
    let v = problem.value(&x).ok()?;
    v.is_finite().then_some((x, v))
}

// Negated stationarity residual of the best builtin certificate at `x`,
// scaled to unit sup norm and listed in `coords` order.
fn descent_direction(problem: &Problem, x: &AdaptedVector, coords: &[(usize, usize, usize)]) -> Option<Vec<f64>> {
    let rec = recover_multipliers(problem, x, CertificateMode::Builtin, &KktTolerances::default()).ok()?;
    let r = stationarity_vector(problem, x, &rec.certificate).ok()?;
    let d: Vec<f64> = coords.iter().map(|&(t, k, i)| -r.slot(t, k)[i]).collect();
    let scale = d.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    (scale > 0.0 && scale.is_finite()).then(|| d.iter().map(|v| v / scale).collect())
}

/// Grid search over restored points, then a pattern search in which
/// every trial move is restored before it is compared.
pub fn brute_force_solve(problem: &Problem, grid: &GridSpec) -> Result<BruteForceSolution> {
    let tree = problem.tree();
    let n = problem.n();
    let dim = problem.total_dimension();
    if dim > BRUTE_FORCE_MAX_DIM {
        return Err(Error::TooLarge(dim));
    }
    if grid.points < 1 || grid.budget < 1 || !(grid.radius > 0.0) || !(grid.polish_tol > 0.0) {
        return Err(Error::InvalidArgument("grid spec needs positive sizes".into()));
    }
    // Coordinates in builtin storage order: stage, slot, component.
    let mut coords: Vec<(usize, usize, usize)> = Vec::with_capacity(dim);
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(dim);
    let per_dim = ((grid.budget as f64).powf(1.0 / dim as f64).floor() as usize).clamp(1, grid.points);
    let mut spacing: f64 = 0.0;
    for t in 0..tree.stages() {
        for (k, &node) in tree.stage_nodes(t).iter().enumerate() {
            for i in 0..n {
                let (lo, hi) = coordinate_range(problem.x_family().set(node), i, grid.radius);
                let (lo, hi) = if lo > hi { (hi, lo) } else { (lo, hi) };
                let count = if hi == lo { 1 } else { per_dim.max(2) };
                let vals: Vec<f64> = if count == 1 {
                    vec![lo]
                } else {
                    spacing = spacing.max((hi - lo) / (count - 1) as f64);
                    (0..count).map(|j| lo + (hi - lo) * j as f64 / (count - 1) as f64).collect()
                };
                coords.push((t, k, i));
                values.push(vals);
            }
        }
    }

    let mut best: Option<(AdaptedVector, f64)> = None;
    let mut feasible_points = 0;
    let mut grid_points = 0;
    let mut index = vec![0usize; dim];
    loop {
        grid_points += 1;
        let mut u = AdaptedVector::zeros(tree, Mode::Builtin, n);
        for (c, &(t, k, i)) in coords.iter().enumerate() {
            u.slot_mut(t, k)[i] = values[c][index[c]];
        }
        if let Some((x, v)) = restored_value(problem, &u) {
            feasible_points += 1;
            if best.as_ref().map_or(true, |(_, bv)| v < *bv) {
                best = Some((x, v));
            }
        }
        // Odometer increment.
        let mut c = 0;
        while c < dim {
            index[c] += 1;
            if index[c] < values[c].len() {
                break;
            }
            index[c] = 0;
            c += 1;
        }
        if c == dim {
            break;
        }
    }
    let (mut x, mut v) = best.ok_or(Error::EmptyGrid)?;

    // Pattern directions: single coordinates and all signed pairs. Pair
    // moves let a decision slide along an active coupling constraint, where
    // restoration then repairs the later stages.
    let mut pattern: Vec<Vec<f64>> = Vec::new();
    for a in 0..dim {
        let mut e = vec![0.0; dim];
        e[a] = 1.0;
        pattern.push(e);
    }
    for a in 0..dim {
        for b in a + 1..dim {
            for w in [1.0, -1.0] {
                let mut e = vec![0.0; dim];
                e[a] = 1.0;
                e[b] = w;
                pattern.push(e);
            }
        }
    }
    let mut h = if spacing > 0.0 { spacing } else { grid.radius };
    let mut evals = 0;
    while h >= grid.polish_tol && evals < grid.max_polish_evals {
        let mut improved = false;
        // A boundary whose position depends on earlier decisions bends the
        // feasible set along slopes no fixed pattern contains. The negated
        // least-squares stationarity residual is the steepest descent
        // direction within the linearized feasible cone, so it is tried
        // first in every sweep.
        let steepest = descent_direction(problem, &x, &coords);
        for dir in steepest.iter().chain(&pattern) {
            let signs: &[f64] = if steepest.as_ref() == Some(dir) { &[1.0] } else { &[1.0, -1.0] };
            for &sign in signs {
                // Keep moving while the move helps.
                loop {
                    let mut u = x.clone();
                    for (c, &(t, k, i)) in coords.iter().enumerate() {
                        u.slot_mut(t, k)[i] += sign * dir[c] * h;
                    }
                    evals += 1;
                    match restored_value(problem, &u) {
                        Some((xn, vn)) if vn < v => {
                            x = xn;
                            v = vn;
                            improved = true;
                        }
                        _ => break,
                    }
                    if evals >= grid.max_polish_evals {
                        break;
                    }
                }
            }
        }
        if !improved {
            h *= 0.5;
        }
    }
    Ok(BruteForceSolution {
        policy: x,
        value: v,
        grid_points,
        feasible_points,
        polish_evaluations: evals,
    })
}

/// Settings for [`penalty_solve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySettings {
    /// Penalty weight `K`; must exceed `L_φ · C̄_T`.
    pub k: f64,
    pub steps: usize,
    pub seed: u64,
    pub initial_step: f64,
    /// Non-improving steps tolerated before the step is halved.
    pub window: usize,
}

impl Default for PenaltySettings {
    fn default() -> Self {
        Self {
            k: 10.0,
            steps: 500,
            seed: 0,
            initial_step: 0.5,
            window: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PenaltySolution {
    /// Restored best iterate.
    pub policy: AdaptedVector,
    pub value: f64,
    pub restoration: RecourseReport,
    /// Merit value after each step.
    pub trace: Vec<f64>,
    pub best_merit: f64,
    pub steps_taken: usize,
    pub warning: Option<String>,
}

/// Merit `φ(x) + K C̄_T (Φ(x) + dist(x, X))` and one of its subgradients.
fn merit(problem: &Problem, weight: f64, x: &AdaptedVector) -> Result<(f64, AdaptedVector)> {
    let tree = problem.tree();
    let p = problem.p();
    let pen = phi(tree, problem.operator(), x, problem.y_family(), p)?;
    let rx = family_residuals(tree, problem.x_family(), x)?;
    let mut sub = problem.objective.subgradient(tree, x)?;
    let gphi = phi_subgradient(tree, problem.operator(), x, problem.y_family(), p, None)?;
    sub.axpy(weight, &gphi);
    let mut dist_x = 0.0;
    for t in 0..tree.stages() {
        let d = stage_norm(tree, &rx, t, p);
        dist_x += d;
        if d > 0.0 {
            for (o, r) in sub.stage_mut(t).iter_mut().zip(rx.stage(t)) {
                *o += weight * r / d;
            }
        }
    }
    let value = problem.value(x)? + weight * (pen.value + dist_x);
    Ok((value, sub))
}

/// Normalized subgradient descent on the exact penalty, then restoration
/// of the best iterate.
///
/// Without `start` the initial policy is drawn uniformly from `[-1, 1]`
/// with the settings' seed and then restored, so that pinned decisions
/// start on their constraints.
pub fn penalty_solve(
    problem: &Problem,
    settings: &PenaltySettings,
    start: Option<&AdaptedVector>,
) -> Result<PenaltySolution> {
    let tree = problem.tree();
    if !problem.p().is_two() {
        return Err(Error::UnsupportedNorm(problem.p().value()));
    }
    let c_bar = problem.constraints.builtin_constants().last().copied().unwrap_or(1.0);
    let threshold = problem.l_phi * c_bar;
    if !(settings.k > threshold) {
        return Err(Error::InvalidArgument(format!(
            "penalty weight K = {} must exceed L_phi * C_T = {threshold}",
            settings.k
        )));
    }
    if !(settings.initial_step > 0.0) || settings.window == 0 {
        return Err(Error::InvalidArgument("step and window must be positive".into()));
    }
    let mut x = match start {
        Some(s) => {
            require_policy(problem, s, Mode::Builtin)?;
            s.clone()
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
            let draw = AdaptedVector::from_fn(tree, Mode::Builtin, problem.n(), |_, _| {
                (0..problem.n()).map(|_| rng.gen_range(-1.0..=1.0)).collect()
            });
            match restore_builtin(&problem.constraints, &draw) {
                Ok(report) => report.restored().clone(),
                Err(_) => draw,
            }
        }
    };
    let weight = settings.k * c_bar;
    let (m0, mut sub) = merit(problem, weight, &x)?;
    let mut best = x.clone();
    let mut best_merit = m0;
    let mut step = settings.initial_step;
    let mut stall = 0;
    let mut trace = Vec::with_capacity(settings.steps);
    let mut steps_taken = 0;
    for _ in 0..settings.steps {
        let norm = lp_norm(tree, &sub, PNorm::default());
        if norm == 0.0 || step < 1e-14 {
            break;
        }
        x.axpy(-step / norm, &sub);
        let (mv, sv) = merit(problem, weight, &x)?;
        steps_taken += 1;
        trace.push(mv);
        if mv < best_merit {
            best_merit = mv;
            best = x.clone();
            stall = 0;
            sub = sv;
        } else {
            stall += 1;
            if stall >= settings.window {
                step *= 0.5;
                stall = 0;
                x = best.clone();
                sub = merit(problem, weight, &x)?.1;
            } else {
                sub = sv;
            }
        }
    }
    let warning = match trace.last() {
        Some(&last) if last > m0 => Some(format!(
            "merit rose from {m0:e} to {last:e} over the final window; returning the best iterate"
        )),
        _ => None,
    };
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    let restoration = restore_builtin(&problem.constraints, &best)?;
    let policy = restoration.restored().clone();
    let value = problem.value(&policy)?;
    Ok(PenaltySolution {
        policy,
        value,
        restoration,
        trace,
        best_merit,
        steps_taken,
        warning,
    })
}

/// Both optimality systems at one builtin point, plus the reduction
/// cross-check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub objective_value: f64,
    pub builtin: KktReport,
    pub explicit: KktReport,
    /// Builtin check of the reduced explicit certificate.
    pub reduced: KktReport,
    /// `reduced.stationarity / max(explicit residual, 1e-300)`.
    pub reduction_ratio: f64,
    pub note: String,
}

/// The three certificates behind a [`ComparisonReport`].
#[derive(Debug, Clone)]
pub struct Comparison {
    pub report: ComparisonReport,
    pub builtin: MultiplierCertificate,
    pub explicit: MultiplierCertificate,
    pub reduced: MultiplierCertificate,
}

/// Recovers builtin multipliers at `x`, lifts `x`, recovers explicit
/// multipliers, reduces them, and checks the result with the builtin
/// checker.
pub fn compare_formulations(problem: &Problem, x: &AdaptedVector, tol: &KktTolerances) -> Result<Comparison> {
    let tree = problem.tree();
    require_policy(problem, x, Mode::Builtin)?;
    let builtin = recover_multipliers(problem, x, CertificateMode::Builtin, tol)?;
    let lifted = lift(tree, x);
    let explicit = recover_multipliers(problem, &lifted, CertificateMode::Explicit, tol)?;
    let reduced = reduce_multipliers(tree, &explicit.certificate)?;
    let reduced_report = kkt_residual_builtin(problem, x, &reduced, tol)?;
    let reduction_ratio = reduced_report.stationarity / explicit.report.worst_residual().max(1e-300);
    Ok(Comparison {
        report: ComparisonReport {
            objective_value: problem.value(x)?,
            builtin: builtin.report,
            explicit: explicit.report,
            reduced: reduced_report,
            reduction_ratio,
            note: "recovered multipliers are least-squares witnesses, not canonical duals".into(),
        },
        builtin: builtin.certificate,
        explicit: explicit.certificate,
        reduced,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal::{CausalOperator, StageMap};
    use crate::objective::{Extension, Objective, ObjectiveKind, StageCost};
    use crate::recourse::RecourseInstance;
    use crate::sets::DecomposableFamily;

    fn quad(w: f64, c: f64) -> StageCost {
        StageCost::Quadratic {
            weights: vec![w],
            target: vec![c],
            linear: vec![],
        }
    }

    fn zero_map(cols: usize) -> StageMap {
        StageMap::Affine {
            a: DMatrix::zeros(1, cols),
            b: DVector::zeros(1),
        }
    }

    // min (x - 2)^2 on [0, 1], one stage.
    fn box_problem() -> Problem {
        let tree = ScenarioTree::uniform(&[]).unwrap();
        let op = CausalOperator::from_fn(&tree, 1, 1, 1.0, |t, _| zero_map(t + 1)).unwrap();
        let xf = DecomposableFamily::uniform(
            &tree,
            ConvexSet::Box {
                lower: vec![0.0],
                upper: vec![1.0],
            },
        )
        .unwrap();
        let yf = DecomposableFamily::uniform(&tree, ConvexSet::unconstrained(1)).unwrap();
        let inst = RecourseInstance::new(tree.clone(), op, xf, yf, 1.0, PNorm::default()).unwrap();
        let obj = Objective::new(
            &tree,
            1,
            ObjectiveKind::Expected {
                costs: vec![vec![quad(1.0, 2.0)]],
            },
            Extension::Projected,
        )
        .unwrap();
        Problem::new(inst, obj, 4.0).unwrap()
    }

    // min E[(x_1 - c)^2] with a stage-1 decision and a pinned stage 2.
    fn mean_problem(c: &[f64], extension: Extension) -> Problem {
        let tree = ScenarioTree::uniform(&[c.len()]).unwrap();
        let op = CausalOperator::from_fn(&tree, 1, 1, 1.0, |t, _| zero_map(t + 1)).unwrap();
        let sets = (0..tree.num_nodes())
            .map(|node| {
                if tree.node_stage(node) == 0 {
                    ConvexSet::unconstrained(1)
                } else {
                    ConvexSet::Singleton { point: vec![0.0] }
                }
            })
            .collect();
        let xf = DecomposableFamily::new(&tree, 1, sets).unwrap();
        let yf = DecomposableFamily::uniform(&tree, ConvexSet::unconstrained(1)).unwrap();
        let inst = RecourseInstance::new(tree.clone(), op, xf, yf, 1.0, PNorm::default()).unwrap();
        let costs = vec![
            c.iter().map(|&ci| quad(1.0, ci)).collect(),
            vec![StageCost::zero(1); c.len()],
        ];
        let obj = Objective::new(&tree, 1, ObjectiveKind::Expected { costs }, extension).unwrap();
        Problem::new(inst, obj, 8.0).unwrap()
    }

    // Two stages, binary branching, coupling slab |x_2 + 0.5 x_1| <= 0.3.
    fn coupled_problem() -> Problem {
        let tree = ScenarioTree::uniform(&[2]).unwrap();
        let op = CausalOperator::from_fn(&tree, 1, 1, 1.2, |t, _| {
            let a = if t == 0 {
                DMatrix::from_row_slice(1, 1, &[0.0])
            } else {
                DMatrix::from_row_slice(1, 2, &[0.5, 1.0])
            };
            StageMap::Affine { a, b: DVector::zeros(1) }
        })
        .unwrap();
        let xf = DecomposableFamily::uniform(
            &tree,
            ConvexSet::Box {
                lower: vec![-1.0],
                upper: vec![1.0],
            },
        )
        .unwrap();
        let yf = DecomposableFamily::uniform(
            &tree,
            ConvexSet::Box {
                lower: vec![-0.3],
                upper: vec![0.3],
            },
        )
        .unwrap();
        let inst = RecourseInstance::new(tree.clone(), op, xf, yf, 2.0, PNorm::default()).unwrap();
        let costs = vec![
            vec![quad(1.0, 0.8), quad(1.0, 0.8)],
            vec![quad(1.0, 1.5), quad(2.0, -0.2)],
        ];
        let obj = Objective::new(&tree, 1, ObjectiveKind::Expected { costs }, Extension::Projected).unwrap();
        Problem::new(inst, obj, 10.0).unwrap()
    }

    fn scalar(tree: &ScenarioTree, v: f64) -> AdaptedVector {
        AdaptedVector::from_fn(tree, Mode::Builtin, 1, |_, _| vec![v])
    }

    #[test]
    fn box_problem_brute_force_and_recovery() {
        let problem = box_problem();
        let sol = brute_force_solve(&problem, &GridSpec::default()).unwrap();
        assert!((sol.policy.slot(0, 0)[0] - 1.0).abs() < 1e-9);
        let tol = KktTolerances::default();
        let rec = recover_multipliers(&problem, &sol.policy, CertificateMode::Builtin, &tol).unwrap();
        assert!(rec.found(), "{:?}", rec.report);
        assert!((rec.certificate.n.slot(0, 0)[0] - 2.0).abs() < 1e-8);
        assert!(rec.report.stationarity < 1e-10);
    }

    #[test]
    fn wrong_sign_normal_is_rejected() {
        let problem = box_problem();
        let tree = problem.tree();
        let x = scalar(tree, 1.0);
        let cert = MultiplierCertificate {
            mode: CertificateMode::Builtin,
            g: scalar(tree, -2.0),
            psi: scalar(tree, 0.0),
            n: scalar(tree, -1.0),
            lambda: None,
        };
        let report = kkt_residual_builtin(&problem, &x, &cert, &KktTolerances::default()).unwrap();
        assert!(report.normal_cone_x >= 0.5);
        assert!(!report.pass);
    }

    #[test]
    fn perturbed_multiplier_is_detected() {
        let problem = box_problem();
        let tree = problem.tree();
        let x = scalar(tree, 1.0);
        let tol = KktTolerances::default();
        let eps = 1e-4;
        let cert = MultiplierCertificate {
            mode: CertificateMode::Builtin,
            g: scalar(tree, -2.0 + eps),
            psi: scalar(tree, 0.0),
            n: scalar(tree, 2.0),
            lambda: None,
        };
        let report = kkt_residual_builtin(&problem, &x, &cert, &tol).unwrap();
        assert!(report.subgradient >= eps / 2.0);
        assert!(report.stationarity >= eps / 2.0);
    }

    #[test]
    fn infeasible_point_is_an_error() {
        let problem = box_problem();
        let tree = problem.tree();
        let cert = MultiplierCertificate {
            mode: CertificateMode::Builtin,
            g: scalar(tree, 0.0),
            psi: scalar(tree, 0.0),
            n: scalar(tree, 0.0),
            lambda: None,
        };
        let err = kkt_residual_builtin(&problem, &scalar(tree, 1.5), &cert, &KktTolerances::default()).unwrap_err();
        assert!(matches!(err, Error::InfeasiblePoint(_)));
    }

    #[test]
    fn mean_problem_closed_form() {
        let c = [0.5, -1.0, 2.0];
        let mean = (0.5 - 1.0 + 2.0) / 3.0;
        let problem = mean_problem(&c, Extension::Scenariowise);
        let tree = problem.tree();
        let tol = KktTolerances::default();
        let mut x = AdaptedVector::zeros(tree, Mode::Builtin, 1);
        x.slot_mut(0, 0)[0] = mean;

        let zero_b = AdaptedVector::zeros(tree, Mode::Builtin, 1);
        let cert_b = MultiplierCertificate {
            mode: CertificateMode::Builtin,
            g: zero_b.clone(),
            psi: zero_b.clone(),
            n: zero_b,
            lambda: None,
        };
        let rb = kkt_residual_builtin(&problem, &x, &cert_b, &tol).unwrap();
        assert!(rb.pass && rb.stationarity < 1e-15, "{rb:?}");

        let xr = lift(tree, &x);
        let g = AdaptedVector::from_fn(tree, Mode::Relaxed, 1, |t, s| {
            vec![if t == 0 { 2.0 * (mean - c[s]) } else { 0.0 }]
        });
        let zero_r = AdaptedVector::zeros(tree, Mode::Relaxed, 1);
        let cert_e = MultiplierCertificate {
            mode: CertificateMode::Explicit,
            lambda: Some(-&g),
            g,
            psi: zero_r.clone(),
            n: zero_r,
        };
        let re = kkt_residual_explicit(&problem, &xr, &cert_e, &tol).unwrap();
        assert!(re.pass, "{re:?}");
        assert!(re.stationarity == 0.0 && re.kernel < 1e-15);

        let reduced = reduce_multipliers(tree, &cert_e).unwrap();
        let rr = kkt_residual_builtin(&problem, &x, &reduced, &tol).unwrap();
        assert!(rr.pass && rr.stationarity < 1e-15);
    }

    #[test]
    fn mean_problem_solvers_agree() {
        let c = [0.5, -1.0, 2.0];
        let mean = (0.5 - 1.0 + 2.0) / 3.0;
        let problem = mean_problem(&c, Extension::Projected);
        let bf = brute_force_solve(&problem, &GridSpec::default()).unwrap();
        assert!((bf.policy.slot(0, 0)[0] - mean).abs() < 1e-8);
        let settings = PenaltySettings {
            k: 30.0,
            seed: 3,
            ..PenaltySettings::default()
        };
        let ps = penalty_solve(&problem, &settings, None).unwrap();
        assert!((ps.policy.slot(0, 0)[0] - bf.policy.slot(0, 0)[0]).abs() < 1e-4);
        let again = penalty_solve(&problem, &settings, None).unwrap();
        assert_eq!(ps.trace, again.trace);
    }

    #[test]
    fn penalty_box_problem() {
        let problem = box_problem();
        let settings = PenaltySettings::default();
        let sol = penalty_solve(&problem, &settings, Some(&scalar(problem.tree(), 0.0))).unwrap();
        assert!((sol.policy.slot(0, 0)[0] - 1.0).abs() < 1e-4);
        assert!(sol.steps_taken <= 500);

        let start = scalar(problem.tree(), 1.0);
        let sol = penalty_solve(&problem, &settings, Some(&start)).unwrap();
        assert_eq!(sol.policy, start);

        let weak = PenaltySettings {
            k: 3.0,
            ..settings
        };
        assert!(penalty_solve(&problem, &weak, None).is_err());
    }

    #[test]
    fn brute_force_guards() {
        let tree = ScenarioTree::uniform(&[3, 3]).unwrap();
        let op = CausalOperator::from_fn(&tree, 1, 1, 1.0, |t, _| zero_map(t + 1)).unwrap();
        let xf = DecomposableFamily::uniform(&tree, ConvexSet::unconstrained(1)).unwrap();
        let yf = DecomposableFamily::uniform(&tree, ConvexSet::unconstrained(1)).unwrap();
        let inst = RecourseInstance::new(tree.clone(), op, xf, yf, 1.0, PNorm::default()).unwrap();
        let costs = vec![vec![quad(1.0, 0.0); 9]; 3];
        let obj = Objective::new(&tree, 1, ObjectiveKind::Expected { costs }, Extension::Projected).unwrap();
        let big = Problem::new(inst, obj, 1.0).unwrap();
        assert!(matches!(brute_force_solve(&big, &GridSpec::default()), Err(Error::TooLarge(13))));

        // x in [1, 2] but F(x) = x must be 0.
        let tree = ScenarioTree::uniform(&[]).unwrap();
        let op = CausalOperator::from_fn(&tree, 1, 1, 1.0, |_, _| StageMap::Affine {
            a: DMatrix::identity(1, 1),
            b: DVector::zeros(1),
        })
        .unwrap();
        let xf = DecomposableFamily::uniform(
            &tree,
            ConvexSet::Box {
                lower: vec![1.0],
                upper: vec![2.0],
            },
        )
        .unwrap();
        let yf = DecomposableFamily::uniform(&tree, ConvexSet::Singleton { point: vec![0.0] }).unwrap();
        let inst = RecourseInstance::new(tree.clone(), op, xf, yf, 1.0, PNorm::default()).unwrap();
        let obj = Objective::new(
            &tree,
            1,
            ObjectiveKind::Expected {
                costs: vec![vec![quad(1.0, 0.0)]],
            },
            Extension::Projected,
        )
        .unwrap();
        let bad = Problem::new(inst, obj, 1.0).unwrap();
        assert!(matches!(brute_force_solve(&bad, &GridSpec::default()), Err(Error::EmptyGrid)));
    }

    #[test]
    fn coupled_problem_round_trip_and_reduction() {
        let problem = coupled_problem();
        let tree = problem.tree();
        let tol = KktTolerances::default();
        let sol = brute_force_solve(&problem, &GridSpec::default()).unwrap();
        let cmp = compare_formulations(&problem, &sol.policy, &tol).unwrap();
        let r = &cmp.report;
        assert!(r.builtin.pass, "{:?}", r.builtin);
        assert!(r.explicit.pass, "{:?}", r.explicit);
        assert!(r.reduced.pass, "{:?}", r.reduced);
        assert!(r.reduced.stationarity <= 10.0 * r.explicit.worst_residual() + 1e-15);
        // The slab binds in the first scenario, so ψ is nonzero there.
        assert!(cmp.builtin.psi.max_abs() > 1e-3);
        let _ = tree;
    }

    #[test]
    fn builtin_left_side_matches_direct_sums() {
        let problem = coupled_problem();
        let tree = problem.tree();
        let x = AdaptedVector::from_stages(tree, Mode::Builtin, 1, vec![vec![0.2], vec![0.1, -0.4]]).unwrap();
        let psi = AdaptedVector::from_stages(tree, Mode::Builtin, 1, vec![vec![0.3], vec![-0.7, 1.1]]).unwrap();
        let g = AdaptedVector::from_stages(tree, Mode::Builtin, 1, vec![vec![0.5], vec![0.2, 0.9]]).unwrap();
        let n = AdaptedVector::from_stages(tree, Mode::Builtin, 1, vec![vec![-0.1], vec![0.0, 0.4]]).unwrap();
        let cert = MultiplierCertificate {
            mode: CertificateMode::Builtin,
            g: g.clone(),
            psi: psi.clone(),
            n: n.clone(),
            lambda: None,
        };
        let via_adjoint = stationarity_vector(&problem, &x, &cert).unwrap();
        let op = problem.operator();
        for t in 0..tree.stages() {
            for (k, &node) in tree.stage_nodes(t).iter().enumerate() {
                let own = op.jacobian_block(tree, &x, t, t, k).unwrap();
                let mut direct = g.slot(t, k)[0] + n.slot(t, k)[0] + own[(0, 0)] * psi.slot(t, k)[0];
                for l in t + 1..tree.stages() {
                    for (j, &later) in tree.stage_nodes(l).iter().enumerate() {
                        if tree.ancestor(later, t) != node {
                            continue;
                        }
                        let w = tree.node_prob(later) / tree.node_prob(node);
                        let a = op.jacobian_block(tree, &x, l, t, j).unwrap();
                        direct += w * a[(0, 0)] * psi.slot(l, j)[0];
                    }
                }
                assert!((direct - via_adjoint.slot(t, k)[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_tree_reduction_is_identity() {
        let problem = box_problem();
        let tree = problem.tree();
        let x = lift(tree, &scalar(tree, 1.0));
        let rec = recover_multipliers(&problem, &x, CertificateMode::Explicit, &KktTolerances::default()).unwrap();
        assert!(rec.found());
        assert_eq!(rec.certificate.lambda.as_ref().unwrap().max_abs(), 0.0);
        let reduced = reduce_multipliers(tree, &rec.certificate).unwrap();
        assert_eq!(reduced.g.stage(0), rec.certificate.g.stage(0));
        assert_eq!(reduced.n.stage(0), rec.certificate.n.stage(0));
        assert_eq!(reduced.psi.stage(0), rec.certificate.psi.stage(0));
    }
}
