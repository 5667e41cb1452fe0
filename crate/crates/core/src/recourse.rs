//! Complete subregular recourse and stage-wise feasibility restoration.
//!
//! The node problem asks for `ξ ∈ X_t(ω)` with `f_t(ζ, ξ, ω) ∈ Y_t(ω)`
//! close to a target `η`. We always select the point of the node feasible
//! set nearest to `η` (exactly, when the map is affine in `ξ` and both
//! sets are polyhedral) and report the achieved ratio
//! `||ξ - η|| / (d(f_t(ζ, η), Y_t) + d(η, X_t))`.
//!
//! [`restore_builtin`] walks the stages forward, solving one node problem
//! per stage-`t` node with `η = u_t`. [`restore_relaxed`] does the same
//! with `η = E_t[u_t]` and returns a nonanticipative policy. Both report
//! the certified constants
//!
//! * builtin: `C̄_t = C (1 + C L)^{t-1}`, which equals `C (1 + L Σ_{s<t} C̄_s)`;
//! * relaxed: `C̄_t = (1 + C + C L)(1 + C L)^{t-1}`;
//!
//! with `L = √T C_f`. The bound checked is
//! `Σ_t ||x̄_t - u_t||_p <= C̄_T Σ_t (residual terms)_t`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapted::{
    conditional_expectation_builtin, lift, stage_gaps, stage_norm, AdaptedVector, Mode, PNorm,
};
use crate::causal::{CausalOperator, StageMap};
use crate::error::{Error, Result};
use crate::penalty::{family_residuals, phi};
use crate::qp::{lstsq, project_polyhedron};
use crate::sets::{ConvexSet, DecomposableFamily, LinearDescription};
use crate::tree::ScenarioTree;

/// Node systems count as solved when both distances are at most this.
pub const NODE_TOL: f64 = 1e-9;

/// Residual below which the target is returned unchanged.
const SHORTCUT_TOL: f64 = 1e-12;

/// Iteration cap of the nonlinear node solver.
pub const MAX_NODE_ITERATIONS: usize = 200;

/// Stopping tolerance of the nonlinear node solver.
pub const NODE_SOLVER_TOL: f64 = 1e-10;

/// Absolute slack allowed in the restoration bound for round-off.
pub const BOUND_SLACK: f64 = 1e-12;

/// Constraint data shared by the restoration routines.
#[derive(Debug, Clone)]
pub struct RecourseInstance {
    pub tree: ScenarioTree,
    pub operator: CausalOperator,
    pub x_family: DecomposableFamily,
    pub y_family: DecomposableFamily,
    /// Declared node recourse constant `C`.
    pub recourse_c: f64,
    pub p: PNorm,
}

impl RecourseInstance {
    pub fn new(
        tree: ScenarioTree,
        operator: CausalOperator,
        x_family: DecomposableFamily,
        y_family: DecomposableFamily,
        recourse_c: f64,
        p: PNorm,
    ) -> Result<Self> {
        if x_family.dim() != operator.n() {
            return Err(Error::DimensionMismatch {
                context: "X family dimension",
                expected: operator.n(),
                found: x_family.dim(),
            });
        }
        if y_family.dim() != operator.m() {
            return Err(Error::DimensionMismatch {
                context: "Y family dimension",
                expected: operator.m(),
                found: y_family.dim(),
            });
        }
        if !(recourse_c > 0.0) || !recourse_c.is_finite() {
            return Err(Error::InvalidArgument(format!("recourse constant must be positive, got {recourse_c}")));
        }
        Ok(Self {
            tree,
            operator,
            x_family,
            y_family,
            recourse_c,
            p,
        })
    }

    /// `L = √T C_f`.
    pub fn lipschitz(&self) -> f64 {
        self.operator.lipschitz_constant(&self.tree)
    }

    /// Builtin certificate constants `C̄_1, ..., C̄_T`.
    pub fn builtin_constants(&self) -> Vec<f64> {
        builtin_constants(self.recourse_c, self.lipschitz(), self.tree.stages())
    }

    /// Relaxed certificate constants `C̄_1, ..., C̄_T`.
    pub fn relaxed_constants(&self) -> Vec<f64> {
        relaxed_constants(self.recourse_c, self.lipschitz(), self.tree.stages())
    }

    /// `(Φ(x), dist(x, X))` in the aggregated stage-sum form.
    pub fn infeasibility(&self, x: &AdaptedVector) -> Result<(f64, f64)> {
        let pen = phi(&self.tree, &self.operator, x, &self.y_family, self.p)?;
        let rx = family_residuals(&self.tree, &self.x_family, x)?;
        let dx = (0..self.tree.stages()).map(|t| stage_norm(&self.tree, &rx, t, self.p)).sum();
        Ok((pen.value, dx))
    }
}

/// `C̄_1 = C`, `C̄_t = C (1 + L Σ_{s<t} C̄_s)`.
pub fn builtin_constants(c: f64, l: f64, stages: usize) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(stages);
    for _ in 0..stages {
        let earlier: f64 = out.iter().sum();
        out.push(c * (1.0 + l * earlier));
    }
    out
}

/// `C̄_1 = K`, `C̄_t = K + C L Σ_{s<t} C̄_s` with `K = 1 + C + C L`.
pub fn relaxed_constants(c: f64, l: f64, stages: usize) -> Vec<f64> {
    let k = 1.0 + c + c * l;
    let mut out: Vec<f64> = Vec::with_capacity(stages);
    for _ in 0..stages {
        let earlier: f64 = out.iter().sum();
        out.push(k + c * l * earlier);
    }
    out
}

/// Result of one node solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSolution {
    pub xi: Vec<f64>,
    /// `||ξ - η||`.
    pub distance: f64,
    /// `d(f(ζ, η), Y) + d(η, X)`.
    pub residual: f64,
    /// `distance / residual`, zero when both vanish.
    pub ratio: f64,
    /// Whether the exact polyhedral path was used.
    pub exact: bool,
    pub iterations: usize,
    /// `d(f(ζ, ξ), Y) + d(ξ, X)` at the returned point.
    pub final_residual: f64,
    pub converged: bool,
}

fn node_residual(map: &StageMap, zeta: &[f64], xi: &[f64], x_set: &ConvexSet, y_set: &ConvexSet) -> Result<f64> {
    let y = map.evaluate(&stack(zeta, xi));
    Ok(y_set.distance(y.as_slice())? + x_set.distance(xi)?)
}

fn stack(zeta: &[f64], xi: &[f64]) -> DVector<f64> {
    DVector::from_iterator(zeta.len() + xi.len(), zeta.iter().chain(xi).copied())
}

fn ratio(distance: f64, residual: f64) -> f64 {
    if distance == 0.0 {
        0.0
    } else if residual == 0.0 {
        f64::INFINITY
    } else {
        distance / residual
    }
}

// {ξ : ξ ∈ X, c + J ξ ∈ Y} as one linear description.
fn node_polyhedron(
    x_desc: &LinearDescription,
    y_desc: &LinearDescription,
    jac: &DMatrix<f64>,
    offset: &DVector<f64>,
) -> LinearDescription {
    let n = jac.ncols();
    let stack_rows = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
        let mut out = DMatrix::zeros(a.nrows() + b.nrows(), n);
        out.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
        out.view_mut((a.nrows(), 0), (b.nrows(), n)).copy_from(b);
        out
    };
    let stack_vec = |a: &DVector<f64>, b: DVector<f64>| {
        DVector::from_iterator(a.len() + b.len(), a.iter().copied().chain(b.iter().copied()))
    };
    LinearDescription {
        g: stack_rows(&x_desc.g, &(&y_desc.g * jac)),
        h: stack_vec(&x_desc.h, &y_desc.h - &y_desc.g * offset),
        e: stack_rows(&x_desc.e, &(&y_desc.e * jac)),
        e_rhs: stack_vec(&x_desc.e_rhs, &y_desc.e_rhs - &y_desc.e * offset),
    }
}

/// Finds `ξ ∈ X` with `f(ζ, ξ) ∈ Y` nearest to `η`.
///
/// `stage` (1-based) and `node_id` only label errors. Infeasible systems
/// on the exact path are hard errors; a nonlinear solve that stalls returns
/// `converged = false` with its best iterate.
pub fn node_recourse_solve(
    map: &StageMap,
    zeta: &[f64],
    eta: &[f64],
    x_set: &ConvexSet,
    y_set: &ConvexSet,
    stage: usize,
    node_id: u64,
) -> Result<NodeSolution> {
    let n = eta.len();
    if map.in_dim() != zeta.len() + n {
        return Err(Error::DimensionMismatch {
            context: "node recourse history",
            expected: map.in_dim() - n,
            found: zeta.len(),
        });
    }
    let residual = node_residual(map, zeta, eta, x_set, y_set)?;
    let done = |xi: Vec<f64>, exact: bool, iterations: usize| -> Result<NodeSolution> {
        let distance = xi.iter().zip(eta).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let final_residual = node_residual(map, zeta, &xi, x_set, y_set)?;
        Ok(NodeSolution {
            distance,
            residual,
            ratio: ratio(distance, residual),
            exact,
            iterations,
            final_residual,
            converged: final_residual <= NODE_TOL,
            xi,
        })
    };
    if residual <= SHORTCUT_TOL {
        return done(eta.to_vec(), true, 0);
    }

    let x_desc = x_set.linear_description();
    let y_desc = y_set.linear_description();
    if let (true, Some(xd), Some(yd)) = (map.affine_in_last(n), &x_desc, &y_desc) {
        let zero = vec![0.0; n];
        let z0 = stack(zeta, &zero);
        let offset = map.evaluate(&z0);
        let jac = map.jacobian(&z0).columns(zeta.len(), n).into_owned();
        let poly = node_polyhedron(xd, yd, &jac, &offset);
        let target = DVector::from_column_slice(eta);
        return match project_polyhedron(&target, &poly.g, &poly.h, &poly.e, &poly.e_rhs) {
            Some(xi) => {
                let sol = done(xi.iter().copied().collect(), true, 1)?;
                if sol.converged {
                    Ok(sol)
                } else {
                    Err(Error::NodeInfeasible { stage, node: node_id })
                }
            }
            None => Err(Error::NodeInfeasible { stage, node: node_id }),
        };
    }

    let (xi, iterations) = nonlinear_node_solve(map, zeta, eta, x_set, y_set, x_desc.as_ref(), y_desc.as_ref())?;
    done(xi, false, iterations)
}

// Sequential linearization: project η onto the linearized node set when
// both sets are polyhedral, with Levenberg–Marquardt steps on the stacked
// distance residual as the fallback.
fn nonlinear_node_solve(
    map: &StageMap,
    zeta: &[f64],
    eta: &[f64],
    x_set: &ConvexSet,
    y_set: &ConvexSet,
    x_desc: Option<&LinearDescription>,
    y_desc: Option<&LinearDescription>,
) -> Result<(Vec<f64>, usize)> {
    let n = eta.len();
    let target = DVector::from_column_slice(eta);
    let mut xi = DVector::from_vec(x_set.project(eta)?);
    let merit = |xi: &DVector<f64>| node_residual(map, zeta, xi.as_slice(), x_set, y_set);
    let mut current = merit(&xi)?;
    let mut mu = 1e-3;
    for iter in 0..MAX_NODE_ITERATIONS {
        if current <= NODE_SOLVER_TOL {
            return Ok((xi.iter().copied().collect(), iter));
        }
        let z = stack(zeta, xi.as_slice());
        let y = map.evaluate(&z);
        let jac = map.jacobian(&z).columns(zeta.len(), n).into_owned();

        let mut accepted = false;
        if let (Some(xd), Some(yd)) = (x_desc, y_desc) {
            let offset = &y - &jac * &xi;
            let poly = node_polyhedron(xd, yd, &jac, &offset);
            if let Some(next) = project_polyhedron(&target, &poly.g, &poly.h, &poly.e, &poly.e_rhs) {
                let step = next - &xi;
                let mut s = 1.0;
                for _ in 0..30 {
                    let trial = &xi + &step * s;
                    let value = merit(&trial)?;
                    if value < current {
                        xi = trial;
                        current = value;
                        accepted = true;
                        break;
                    }
                    s *= 0.5;
                }
            }
        }
        if !accepted {
            let ry = DVector::from_vec(y.iter().copied().collect::<Vec<_>>())
                - DVector::from_vec(y_set.project(y.as_slice())?);
            let rx = &xi - DVector::from_vec(x_set.project(xi.as_slice())?);
            let m = ry.len();
            let mut big_j = DMatrix::zeros(m + n, n);
            big_j.view_mut((0, 0), (m, n)).copy_from(&jac);
            big_j.view_mut((m, 0), (n, n)).fill_with_identity();
            let mut r = DVector::zeros(m + n);
            r.rows_mut(0, m).copy_from(&ry);
            r.rows_mut(m, n).copy_from(&rx);
            for _ in 0..20 {
                let lhs = big_j.transpose() * &big_j + DMatrix::identity(n, n) * mu;
                let rhs = -(big_j.transpose() * &r);
                let step = lstsq(&lhs, &rhs);
                let trial = &xi + step;
                let value = merit(&trial)?;
                if value < current {
                    xi = trial;
                    current = value;
                    mu = (mu * 0.3).max(1e-12);
                    accepted = true;
                    break;
                }
                mu *= 10.0;
            }
        }
        if !accepted {
            return Ok((xi.iter().copied().collect(), iter + 1));
        }
    }
    Ok((xi.iter().copied().collect(), MAX_NODE_ITERATIONS))
}

/// Outcome of a restoration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecourseReport {
    pub mode: Mode,
    /// The restored policy, in the mode of the input.
    #[serde(skip)]
    pub restored: Option<AdaptedVector>,
    /// `||x̄_t - u_t||_p` per stage.
    pub deviations: Vec<f64>,
    /// `||d(F_t(u), Y_t)||_p` per stage.
    pub dist_f: Vec<f64>,
    /// `||d(u_t, X_t)||_p` per stage.
    pub dist_x: Vec<f64>,
    /// `||u_t - E_t[u_t]||_p` per stage; zeros in builtin mode.
    pub gaps: Vec<f64>,
    /// Certified constants `C̄_1, ..., C̄_T`.
    pub constants: Vec<f64>,
    pub total_deviation: f64,
    pub total_residual: f64,
    /// `C̄_T · total_residual`.
    pub bound: f64,
    pub bound_satisfied: bool,
    /// Largest node ratio encountered; compare with the declared `C`.
    pub max_node_ratio: f64,
    pub declared_c: f64,
    /// `Φ(x̄) + dist(x̄, X)` after restoration.
    pub final_infeasibility: f64,
}

impl RecourseReport {
    pub fn restored(&self) -> &AdaptedVector {
        self.restored.as_ref().expect("report carries the restored policy")
    }
}

fn require_policy(inst: &RecourseInstance, u: &AdaptedVector, mode: Mode) -> Result<()> {
    if u.mode() != mode {
        return Err(Error::ModeMismatch(format!("expected a {mode:?} policy")));
    }
    if u.dim() != inst.operator.n() {
        return Err(Error::DimensionMismatch {
            context: "policy dimension",
            expected: inst.operator.n(),
            found: u.dim(),
        });
    }
    Ok(())
}

// Forward pass with node targets `eta` (builtin layout). Returns x̄ and the
// largest node ratio.
fn forward_pass(inst: &RecourseInstance, eta: &AdaptedVector) -> Result<(AdaptedVector, f64)> {
    let tree = &inst.tree;
    let n = inst.operator.n();
    let mut xbar = AdaptedVector::zeros(tree, Mode::Builtin, n);
    let mut max_ratio: f64 = 0.0;
    for t in 0..tree.stages() {
        for (k, &node) in tree.stage_nodes(t).iter().enumerate() {
            let hist = inst.operator.history(tree, &xbar, t, k);
            let zeta = &hist.as_slice()[..n * t];
            let sol = node_recourse_solve(
                inst.operator.map(node),
                zeta,
                eta.slot(t, k),
                inst.x_family.set(node),
                inst.y_family.set(node),
                t + 1,
                tree.node_id(node),
            )?;
            if !sol.converged {
                return Err(Error::NodeSolveFailed {
                    stage: t + 1,
                    node: tree.node_id(node),
                    residual: sol.final_residual,
                });
            }
            max_ratio = max_ratio.max(sol.ratio);
            xbar.slot_mut(t, k).copy_from_slice(&sol.xi);
        }
    }
    Ok((xbar, max_ratio))
}

/// Restores a builtin policy to feasibility stage by stage.
pub fn restore_builtin(inst: &RecourseInstance, u: &AdaptedVector) -> Result<RecourseReport> {
    require_policy(inst, u, Mode::Builtin)?;
    let (xbar, max_ratio) = forward_pass(inst, u)?;
    finish_report(inst, u, xbar, max_ratio, inst.builtin_constants())
}

/// Restores a relaxed policy to a feasible nonanticipative one, targeting
/// `E_t[u_t]` at each stage-`t` node.
pub fn restore_relaxed(inst: &RecourseInstance, u: &AdaptedVector) -> Result<RecourseReport> {
    require_policy(inst, u, Mode::Relaxed)?;
    let eta = conditional_expectation_builtin(&inst.tree, u)?;
    let (xbar, max_ratio) = forward_pass(inst, &eta)?;
    finish_report(inst, u, lift(&inst.tree, &xbar), max_ratio, inst.relaxed_constants())
}

fn finish_report(
    inst: &RecourseInstance,
    u: &AdaptedVector,
    restored: AdaptedVector,
    max_node_ratio: f64,
    constants: Vec<f64>,
) -> Result<RecourseReport> {
    let tree = &inst.tree;
    let p = inst.p;
    let stages = tree.stages();
    let diff = &restored - u;
    let deviations: Vec<f64> = (0..stages).map(|t| stage_norm(tree, &diff, t, p)).collect();
    let pen = phi(tree, &inst.operator, u, &inst.y_family, p)?;
    let rx = family_residuals(tree, &inst.x_family, u)?;
    let dist_x: Vec<f64> = (0..stages).map(|t| stage_norm(tree, &rx, t, p)).collect();
    let gaps = stage_gaps(tree, u, p)?;
    let total_deviation: f64 = deviations.iter().sum();
    let total_residual: f64 = pen.stage_distances.iter().chain(&dist_x).chain(&gaps).sum();
    let bound = constants.last().copied().unwrap_or(0.0) * total_residual;
    let (phi_bar, dx_bar) = inst.infeasibility(&restored)?;
    Ok(RecourseReport {
        mode: u.mode(),
        restored: Some(restored),
        bound_satisfied: total_deviation <= bound + BOUND_SLACK,
        deviations,
        dist_f: pen.stage_distances,
        dist_x,
        gaps,
        constants,
        total_deviation,
        total_residual,
        bound,
        max_node_ratio,
        declared_c: inst.recourse_c,
        final_infeasibility: phi_bar + dx_bar,
    })
}

/// Box from which node-problem samples are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecourseSampler {
    /// Ancestor decisions are drawn from `[-r, r]^n` and projected onto
    /// the ancestor's `X`.
    pub history_radius: f64,
    /// Targets `η` are drawn uniformly from `[-r, r]^n`.
    pub eta_radius: f64,
}

impl Default for RecourseSampler {
    fn default() -> Self {
        Self {
            history_radius: 3.0,
            eta_radius: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstSample {
    pub stage: usize,
    pub node: u64,
    pub zeta: Vec<f64>,
    pub eta: Vec<f64>,
    pub ratio: f64,
}

/// Empirical audit of a recourse constant over a sampled region.
///
/// The defining property quantifies over every `η ∈ R^n`; the report
/// only covers the sampled box recorded in `region`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecourseVerification {
    pub samples: usize,
    pub seed: u64,
    pub region: RecourseSampler,
    pub declared_c: f64,
    pub max_ratio: f64,
    /// Samples whose target was already feasible (ratio 0 by convention).
    pub trivial_samples: usize,
    /// Samples whose node system could not be solved.
    pub failures: usize,
    pub worst: Option<WorstSample>,
    pub failure_witness: Option<WorstSample>,
    pub pass: bool,
}

/// Samples node problems and reports the largest achieved ratio.
pub fn verify_recourse_constant(
    inst: &RecourseInstance,
    c: f64,
    sampler: RecourseSampler,
    samples: usize,
    seed: u64,
) -> Result<RecourseVerification> {
    let tree = &inst.tree;
    let n = inst.operator.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = RecourseVerification {
        samples,
        seed,
        region: sampler,
        declared_c: c,
        max_ratio: 0.0,
        trivial_samples: 0,
        failures: 0,
        worst: None,
        failure_witness: None,
        pass: true,
    };
    for _ in 0..samples {
        let node = rng.gen_range(0..tree.num_nodes());
        let t = tree.node_stage(node);
        let mut zeta = Vec::with_capacity(n * t);
        for s in 0..t {
            let anc = tree.ancestor(node, s);
            let raw: Vec<f64> = (0..n)
                .map(|_| rng.gen_range(-sampler.history_radius..=sampler.history_radius))
                .collect();
            zeta.extend(inst.x_family.set(anc).project(&raw)?);
        }
        let eta: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(-sampler.eta_radius..=sampler.eta_radius))
            .collect();
        let sample = |ratio: f64| WorstSample {
            stage: t + 1,
            node: tree.node_id(node),
            zeta: zeta.clone(),
            eta: eta.clone(),
            ratio,
        };
        match node_recourse_solve(
            inst.operator.map(node),
            &zeta,
            &eta,
            inst.x_family.set(node),
            inst.y_family.set(node),
            t + 1,
            tree.node_id(node),
        ) {
            Ok(sol) if sol.converged => {
                if sol.residual <= SHORTCUT_TOL {
                    report.trivial_samples += 1;
                }
                if sol.ratio > report.max_ratio || report.worst.is_none() {
                    report.max_ratio = report.max_ratio.max(sol.ratio);
                    report.worst = Some(sample(sol.ratio));
                }
            }
            Ok(_) | Err(Error::NodeInfeasible { .. }) => {
                report.failures += 1;
                if report.failure_witness.is_none() {
                    report.failure_witness = Some(sample(f64::INFINITY));
                }
            }
            Err(e) => return Err(e),
        }
    }
    report.pass = report.failures == 0 && report.max_ratio <= c;
    Ok(report)
}

/// `C = max(1, 2 · max ratio)`; any unsolvable sample is an error.
pub fn estimate_recourse_constant(
    inst: &RecourseInstance,
    sampler: RecourseSampler,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let rep = verify_recourse_constant(inst, f64::INFINITY, sampler, samples, seed)?;
    if let Some(w) = rep.failure_witness {
        return Err(Error::NodeInfeasible {
            stage: w.stage,
            node: w.node,
        });
    }
    Ok((2.0 * rep.max_ratio).max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal::Nonlinearity;

    fn scalar_box(l: f64, u: f64) -> ConvexSet {
        ConvexSet::Box {
            lower: vec![l],
            upper: vec![u],
        }
    }

    fn free() -> ConvexSet {
        ConvexSet::unconstrained(1)
    }

    fn diff_map(t: usize) -> StageMap {
        let mut a = DMatrix::zeros(1, t + 1);
        a[(0, t)] = 1.0;
        if t > 0 {
            a[(0, t - 1)] = -1.0;
        }
        StageMap::Affine { a, b: DVector::zeros(1) }
    }

    #[test]
    fn constants_closed_form() {
        let c = 1.5;
        let l = 0.7;
        let b = builtin_constants(c, l, 4);
        let r = relaxed_constants(c, l, 4);
        for t in 0..4 {
            assert!((b[t] - c * (1.0 + c * l).powi(t as i32)).abs() < 1e-12);
            assert!((r[t] - (1.0 + c + c * l) * (1.0 + c * l).powi(t as i32)).abs() < 1e-12);
        }
        assert!(b.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn node_examples() {
        let unconstrained = StageMap::Affine {
            a: DMatrix::zeros(1, 1),
            b: DVector::zeros(1),
        };
        let sol = node_recourse_solve(&unconstrained, &[], &[0.4], &scalar_box(0.0, 1.0), &free(), 1, 0).unwrap();
        assert_eq!(sol.xi, vec![0.4]);
        assert_eq!(sol.ratio, 0.0);

        let sol = node_recourse_solve(&unconstrained, &[], &[1.5], &scalar_box(0.0, 1.0), &free(), 1, 0).unwrap();
        assert!((sol.xi[0] - 1.0).abs() < 1e-14);
        assert!((sol.ratio - 1.0).abs() < 1e-12);

        let zero = ConvexSet::Singleton { point: vec![0.0] };
        let sol = node_recourse_solve(&diff_map(1), &[0.3], &[-1.2], &free(), &zero, 2, 1).unwrap();
        assert!((sol.xi[0] - 0.3).abs() < 1e-14);
        assert!((sol.ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contradictory_node_is_infeasible() {
        let zero = ConvexSet::Singleton { point: vec![0.0] };
        let err = node_recourse_solve(&diff_map(1), &[0.3], &[0.0], &scalar_box(1.0, 2.0), &zero, 2, 7).unwrap_err();
        assert!(matches!(err, Error::NodeInfeasible { stage: 2, node: 7 }));
    }

    #[test]
    fn nonlinear_node_solve_converges() {
        // f(ξ) = ξ + 0.5 sin(ξ) must equal 1
        let map = StageMap::Componentwise {
            sigma: Nonlinearity::Sin,
            a: DMatrix::identity(1, 1),
            b: DVector::from_element(1, -1.0),
            w: DMatrix::from_element(1, 1, 0.5),
            inner: DMatrix::identity(1, 1),
            shift: DVector::zeros(1),
        };
        let zero = ConvexSet::Singleton { point: vec![0.0] };
        let sol = node_recourse_solve(&map, &[], &[3.0], &free(), &zero, 1, 0).unwrap();
        assert!(sol.converged, "{sol:?}");
        let v = sol.xi[0] + 0.5 * sol.xi[0].sin() - 1.0;
        assert!(v.abs() < 1e-9);
    }

    fn chain_instance(tree: ScenarioTree) -> RecourseInstance {
        let op = CausalOperator::from_fn(&tree, 1, 1, 2f64.sqrt(), |t, _| diff_map(t)).unwrap();
        let y_sets: Vec<ConvexSet> = (0..tree.num_nodes())
            .map(|node| {
                if tree.node_stage(node) == 0 {
                    free()
                } else {
                    ConvexSet::Singleton { point: vec![0.0] }
                }
            })
            .collect();
        let y = DecomposableFamily::new(&tree, 1, y_sets).unwrap();
        let x = DecomposableFamily::uniform(&tree, free()).unwrap();
        RecourseInstance::new(tree, op, x, y, 1.0, PNorm::default()).unwrap()
    }

    #[test]
    fn two_stage_chain_restoration() {
        let inst = chain_instance(ScenarioTree::uniform(&[1]).unwrap());
        let u = AdaptedVector::from_stages(&inst.tree, Mode::Builtin, 1, vec![vec![0.5], vec![0.9]]).unwrap();
        let rep = restore_builtin(&inst, &u).unwrap();
        assert!((rep.restored().stage(1)[0] - 0.5).abs() < 1e-14);
        assert!((rep.total_deviation - 0.4).abs() < 1e-14);
        assert!((rep.dist_f[1] - 0.4).abs() < 1e-14);
        assert!(rep.bound_satisfied);
        assert!(rep.final_infeasibility < 1e-12);
    }

    #[test]
    fn feasible_input_is_fixed_and_restoration_idempotent() {
        let inst = chain_instance(ScenarioTree::uniform(&[2, 2]).unwrap());
        let u = AdaptedVector::from_fn(&inst.tree, Mode::Builtin, 1, |t, k| vec![(t + k) as f64 * 0.3]);
        let first = restore_builtin(&inst, &u).unwrap();
        let again = restore_builtin(&inst, first.restored()).unwrap();
        assert_eq!(again.restored(), first.restored());
        assert_eq!(again.total_deviation, 0.0);
    }

    #[test]
    fn relaxed_restoration_on_pinned_two_scenario_tree() {
        // stage 1 decision in [0,1]; stage 2 pinned to 0
        let tree = ScenarioTree::uniform(&[2]).unwrap();
        let op = CausalOperator::from_fn(&tree, 1, 1, 1.0, |t, _| StageMap::Affine {
            a: DMatrix::zeros(1, t + 1),
            b: DVector::zeros(1),
        })
        .unwrap();
        let x_sets = (0..tree.num_nodes())
            .map(|node| {
                if tree.node_stage(node) == 0 {
                    scalar_box(0.0, 1.0)
                } else {
                    ConvexSet::Singleton { point: vec![0.0] }
                }
            })
            .collect();
        let x = DecomposableFamily::new(&tree, 1, x_sets).unwrap();
        let y = DecomposableFamily::uniform(&tree, free()).unwrap();
        let inst = RecourseInstance::new(tree, op, x, y, 1.0, PNorm::default()).unwrap();
        let u = AdaptedVector::from_stages(&inst.tree, Mode::Relaxed, 1, vec![vec![1.5, 0.5], vec![0.0, 0.0]])
            .unwrap();
        let rep = restore_relaxed(&inst, &u).unwrap();
        assert_eq!(rep.restored().stage(0), &[1.0, 1.0]);
        // gap 0.5, dist to X = sqrt(0.5 * 0.25)
        assert!((rep.gaps[0] - 0.5).abs() < 1e-14);
        assert!((rep.dist_x[0] - 0.125f64.sqrt()).abs() < 1e-14);
        assert!((rep.total_deviation - 0.5).abs() < 1e-14);
        assert!(rep.bound_satisfied);
    }

    #[test]
    fn box_only_estimate_is_two() {
        let tree = ScenarioTree::uniform(&[2]).unwrap();
        let op = CausalOperator::from_fn(&tree, 1, 1, 1.0, |t, _| StageMap::Affine {
            a: DMatrix::zeros(1, t + 1),
            b: DVector::zeros(1),
        })
        .unwrap();
        let x = DecomposableFamily::uniform(&tree, scalar_box(-1.0, 1.0)).unwrap();
        let y = DecomposableFamily::uniform(&tree, free()).unwrap();
        let inst = RecourseInstance::new(tree, op, x, y, 1.0, PNorm::default()).unwrap();
        let c = estimate_recourse_constant(&inst, RecourseSampler::default(), 400, 9).unwrap();
        assert!((c - 2.0).abs() < 1e-12, "{c}");
        let again = estimate_recourse_constant(&inst, RecourseSampler::default(), 400, 9).unwrap();
        assert_eq!(c, again);
        let rep = verify_recourse_constant(&inst, 1.0, RecourseSampler::default(), 200, 3).unwrap();
        assert!(rep.pass);
    }
}
