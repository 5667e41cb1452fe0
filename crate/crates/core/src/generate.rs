//! Seeded random instances.
//!
//! Recourse-friendly instances are built around a known feasible policy
//! `x*`. At every node the map reads `f(ξ_{1:t}) = S ξ_t + h(ξ_{1:t-1})`,
//! where `S` selects the first `m` coordinates and the history part `h`
//! has sup-norm Lipschitz constant at most `1/2`. `X` is the box
//! `x* ± w` and `Y` the slab `f(x*) ± s`. For any history taken from the
//! `X` boxes the two interval constraints on each selected coordinate
//! overlap, and the distance to an intersection of two overlapping
//! intervals is the larger of the two distances, so every node ratio is at
//! most 1 and `C = 2` is a valid declaration.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapted::{AdaptedVector, Mode, PNorm};
use crate::causal::{CausalOperator, Nonlinearity, StageMap};
use crate::error::{Error, Result};
use crate::io::ProblemInstanceFile;
use crate::objective::{CostTable, Extension, Objective, ObjectiveKind, StageCost};
use crate::problem::Problem;
use crate::recourse::RecourseInstance;
use crate::sets::{ConvexSet, DecomposableFamily};
use crate::tree::{NodeSpec, ScenarioTree, TreeSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorFamily {
    Affine,
    /// Smooth-library maps; the entry is drawn per node.
    Smooth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetFamily {
    Box,
    Polyhedron,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ObjectiveFamily {
    Quadratic,
    Softplus,
    Cvar { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub stages: usize,
    /// `stages - 1` branching factors.
    pub branching: Vec<usize>,
    pub n: usize,
    pub m: usize,
    pub operator: OperatorFamily,
    pub sets: SetFamily,
    pub objective: ObjectiveFamily,
    pub recourse_friendly: bool,
    /// Draw conditional probabilities instead of splitting evenly.
    #[serde(default)]
    pub random_probabilities: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            stages: 3,
            branching: vec![2, 2],
            n: 2,
            m: 1,
            operator: OperatorFamily::Affine,
            sets: SetFamily::Box,
            objective: ObjectiveFamily::Quadratic,
            recourse_friendly: true,
            random_probabilities: false,
        }
    }
}

/// A generated problem with the feasible policy it was built around.
#[derive(Debug, Clone)]
pub struct GeneratedInstance {
    pub problem: Problem,
    pub reference: AdaptedVector,
}

impl GeneratedInstance {
    /// File form, carrying the reference policy as the candidate.
    pub fn to_file(&self) -> ProblemInstanceFile {
        ProblemInstanceFile::from_problem(&self.problem, Some(&self.reference), None)
    }
}

fn validate(spec: &GeneratorSpec) -> Result<()> {
    let bad = |m: String| Err(Error::InvalidArgument(m));
    if spec.stages == 0 {
        return bad("need at least one stage".into());
    }
    if spec.branching.len() + 1 != spec.stages {
        return bad(format!(
            "{} stages need {} branching factors, got {}",
            spec.stages,
            spec.stages - 1,
            spec.branching.len()
        ));
    }
    if spec.branching.contains(&0) {
        return bad("branching factors must be positive".into());
    }
    if spec.n == 0 || spec.m == 0 {
        return bad("dimensions must be positive".into());
    }
    if spec.recourse_friendly && spec.m > spec.n {
        return bad("recourse-friendly instances need m <= n".into());
    }
    if let ObjectiveFamily::Cvar { alpha } = spec.objective {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return bad(format!("CVaR level must lie in (0, 1], got {alpha}"));
        }
    }
    Ok(())
}

fn build_tree(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Result<ScenarioTree> {
    if !spec.random_probabilities {
        return ScenarioTree::uniform(&spec.branching);
    }
    let mut nodes = vec![NodeSpec {
        id: 0,
        stage: 1,
        parent: None,
        prob: 1.0,
    }];
    let mut frontier = vec![(0u64, 1.0f64)];
    let mut next_id = 1;
    for (t, &b) in spec.branching.iter().enumerate() {
        let mut next = Vec::new();
        for &(pid, mass) in &frontier {
            let raw: Vec<f64> = (0..b).map(|_| rng.gen_range(0.2..1.0)).collect();
            let total: f64 = raw.iter().sum();
            for r in raw {
                let prob = mass * r / total;
                nodes.push(NodeSpec {
                    id: next_id,
                    stage: t + 2,
                    parent: Some(pid),
                    prob,
                });
                next.push((next_id, prob));
                next_id += 1;
            }
        }
        frontier = next;
    }
    ScenarioTree::build(&TreeSpec {
        stages: spec.stages,
        nodes,
    })
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, r: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-r..=r))
}

// Scales every row so its absolute sum is at most `budget`.
fn cap_rows(mut a: DMatrix<f64>, budget: f64) -> DMatrix<f64> {
    for mut row in a.row_iter_mut() {
        let s: f64 = row.iter().map(|v| v.abs()).sum();
        if s > budget {
            row *= budget / s;
        }
    }
    a
}

// Zeroes the last `n` columns (the current decision).
fn history_only(mut a: DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let c = a.ncols();
    a.columns_mut(c - n, n).fill(0.0);
    a
}

fn friendly_map(spec: &GeneratorSpec, t: usize, rng: &mut ChaCha8Rng) -> StageMap {
    let (n, m) = (spec.n, spec.m);
    let cols = n * (t + 1);
    let mut a = history_only(uniform_matrix(rng, m, cols, 1.0), n);
    let b = DVector::from_fn(m, |_, _| rng.gen_range(-0.5..=0.5));
    match spec.operator {
        OperatorFamily::Affine => {
            a = cap_rows(a, 0.5);
            for i in 0..m {
                a[(i, n * t + i)] = 1.0;
            }
            StageMap::Affine { a, b }
        }
        OperatorFamily::Smooth => {
            a = cap_rows(a, 0.25);
            for i in 0..m {
                a[(i, n * t + i)] = 1.0;
            }
            let w = cap_rows(uniform_matrix(rng, m, m, 1.0), 0.25);
            match rng.gen_range(0..4) {
                3 => StageMap::Bilinear {
                    a,
                    b,
                    w,
                    p: cap_rows(history_only(uniform_matrix(rng, m, cols, 1.0), n), 0.5),
                    p_shift: DVector::from_fn(m, |_, _| rng.gen_range(-0.5..=0.5)),
                    q: cap_rows(history_only(uniform_matrix(rng, m, cols, 1.0), n), 0.5),
                    q_shift: DVector::from_fn(m, |_, _| rng.gen_range(-0.5..=0.5)),
                },
                k => StageMap::Componentwise {
                    sigma: [Nonlinearity::Sin, Nonlinearity::Tanh, Nonlinearity::Softplus][k],
                    a,
                    b,
                    w,
                    inner: cap_rows(history_only(uniform_matrix(rng, m, cols, 1.0), n), 1.0),
                    shift: DVector::from_fn(m, |_, _| rng.gen_range(-0.5..=0.5)),
                },
            }
        }
    }
}

fn general_map(spec: &GeneratorSpec, t: usize, rng: &mut ChaCha8Rng) -> StageMap {
    let (n, m) = (spec.n, spec.m);
    let cols = n * (t + 1);
    let a = uniform_matrix(rng, m, cols, 1.0);
    let b = DVector::from_fn(m, |_, _| rng.gen_range(-0.5..=0.5));
    match spec.operator {
        OperatorFamily::Affine => StageMap::Affine { a, b },
        OperatorFamily::Smooth => {
            let w = uniform_matrix(rng, m, m, 0.5);
            match rng.gen_range(0..4) {
                3 => StageMap::Bilinear {
                    a,
                    b,
                    w,
                    p: uniform_matrix(rng, m, cols, 1.0),
                    p_shift: DVector::from_fn(m, |_, _| rng.gen_range(-0.5..=0.5)),
                    q: uniform_matrix(rng, m, cols, 1.0),
                    q_shift: DVector::from_fn(m, |_, _| rng.gen_range(-0.5..=0.5)),
                },
                k => StageMap::Componentwise {
                    sigma: [Nonlinearity::Sin, Nonlinearity::Tanh, Nonlinearity::Softplus][k],
                    a,
                    b,
                    w,
                    inner: uniform_matrix(rng, m, cols, 1.0),
                    shift: DVector::from_fn(m, |_, _| rng.gen_range(-0.5..=0.5)),
                },
            }
        }
    }
}

fn box_set(center: &[f64], half: &[f64]) -> ConvexSet {
    ConvexSet::Box {
        lower: center.iter().zip(half).map(|(c, h)| c - h).collect(),
        upper: center.iter().zip(half).map(|(c, h)| c + h).collect(),
    }
}

// `[I; -I] z <= [u; -l]`, optionally with one extra cut through the box.
fn box_as_polyhedron(center: &[f64], half: &[f64], cut: Option<Vec<f64>>) -> ConvexSet {
    let d = center.len();
    let mut g = Vec::with_capacity(2 * d + 1);
    let mut h = Vec::with_capacity(2 * d + 1);
    for i in 0..d {
        let mut row = vec![0.0; d];
        row[i] = 1.0;
        g.push(row.clone());
        h.push(center[i] + half[i]);
        row[i] = -1.0;
        g.push(row);
        h.push(-(center[i] - half[i]));
    }
    if let Some(a) = cut {
        let min_half = half.iter().cloned().fold(f64::INFINITY, f64::min);
        let l1: f64 = a.iter().map(|v| v.abs()).sum();
        let at_center: f64 = a.iter().zip(center).map(|(x, c)| x * c).sum();
        h.push(at_center + 0.8 * min_half * l1);
        g.push(a);
    }
    ConvexSet::Polyhedron { g, h, dim: d }
}

fn make_set(spec: &GeneratorSpec, center: &[f64], half: &[f64], rng: &mut ChaCha8Rng) -> ConvexSet {
    match spec.sets {
        SetFamily::Box => box_set(center, half),
        SetFamily::Polyhedron => {
            let cut = (!spec.recourse_friendly).then(|| (0..center.len()).map(|_| rng.gen_range(-1.0..=1.0)).collect());
            box_as_polyhedron(center, half, cut)
        }
    }
}

// Sup of the scenario-wise gradient norm over the X boxes.
fn quadratic_bound(costs: &CostTable, boxes: &[Vec<(f64, f64)>]) -> f64 {
    let scenarios = costs.first().map_or(0, |s| s.len());
    (0..scenarios)
        .map(|s| {
            let mut acc = 0.0;
            for (t, stage) in costs.iter().enumerate() {
                if let StageCost::Quadratic { weights, target, .. } = &stage[s] {
                    for (i, (w, c)) in weights.iter().zip(target).enumerate() {
                        let (lo, hi) = boxes[t][s * weights.len() + i];
                        let reach = (lo - c).abs().max((hi - c).abs());
                        acc += (2.0 * w * reach).powi(2);
                    }
                }
            }
            acc.sqrt()
        })
        .fold(0.0, f64::max)
}

/// Builds a deterministic instance from the spec.
pub fn generate(spec: &GeneratorSpec) -> Result<GeneratedInstance> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tree = build_tree(spec, &mut rng)?;
    let (n, m) = (spec.n, spec.m);

    let reference = AdaptedVector::from_fn(&tree, Mode::Builtin, n, |_, _| {
        (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect()
    });
    let maps: Vec<StageMap> = (0..tree.num_nodes())
        .map(|node| {
            let t = tree.node_stage(node);
            if spec.recourse_friendly {
                friendly_map(spec, t, &mut rng)
            } else {
                general_map(spec, t, &mut rng)
            }
        })
        .collect();
    let c_f = maps.iter().map(StageMap::derivative_bound).fold(0.0, f64::max).max(1e-12);
    let operator = CausalOperator::new(&tree, n, m, c_f, maps)?;
    let image = operator.evaluate(&tree, &reference)?;

    let mut x_sets = Vec::with_capacity(tree.num_nodes());
    let mut y_sets = Vec::with_capacity(tree.num_nodes());
    let mut x_halves = Vec::with_capacity(tree.num_nodes());
    for node in 0..tree.num_nodes() {
        let t = tree.node_stage(node);
        let k = tree.local_index(node);
        let half_x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..=1.0)).collect();
        let half_y: Vec<f64> = (0..m).map(|_| rng.gen_range(0.2..=0.5)).collect();
        x_sets.push(make_set(spec, reference.slot(t, k), &half_x, &mut rng));
        y_sets.push(make_set(spec, image.slot(t, k), &half_y, &mut rng));
        x_halves.push(half_x);
    }
    let x_family = DecomposableFamily::new(&tree, n, x_sets)?;
    let y_family = DecomposableFamily::new(&tree, m, y_sets)?;

    // Scenario-wise stage costs and the X boxes along each scenario.
    let scenarios = tree.num_scenarios();
    let mut costs: CostTable = Vec::with_capacity(tree.stages());
    let mut boxes: Vec<Vec<(f64, f64)>> = Vec::with_capacity(tree.stages());
    let mut softplus_sq = vec![0.0; scenarios];
    for t in 0..tree.stages() {
        let mut stage = Vec::with_capacity(scenarios);
        let mut stage_boxes = Vec::with_capacity(scenarios * n);
        for s in 0..scenarios {
            let node = tree.ancestor(tree.scenario_node(s), t);
            let center = reference.slot(t, tree.local_index(node));
            for i in 0..n {
                let h = x_halves[node][i];
                stage_boxes.push((center[i] - h, center[i] + h));
            }
            let cost = match spec.objective {
                ObjectiveFamily::Softplus => {
                    let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                    softplus_sq[s] += a.iter().map(|v| v * v).sum::<f64>();
                    StageCost::SoftplusLinear {
                        a,
                        b: rng.gen_range(-0.5..=0.5),
                    }
                }
                _ => StageCost::Quadratic {
                    weights: (0..n).map(|_| rng.gen_range(0.5..=1.5)).collect(),
                    target: center.iter().map(|c| c + rng.gen_range(-1.0..=1.0)).collect(),
                    linear: Vec::new(),
                },
            };
            stage.push(cost);
        }
        costs.push(stage);
        boxes.push(stage_boxes);
    }
    let (kind, l_phi) = match spec.objective {
        ObjectiveFamily::Quadratic => {
            let l = quadratic_bound(&costs, &boxes);
            (ObjectiveKind::Expected { costs }, l)
        }
        ObjectiveFamily::Softplus => {
            let l = softplus_sq.iter().cloned().fold(0.0, f64::max).sqrt();
            (ObjectiveKind::Expected { costs }, l)
        }
        ObjectiveFamily::Cvar { alpha } => {
            let l = quadratic_bound(&costs, &boxes) / alpha.sqrt();
            (ObjectiveKind::Cvar { alpha, costs }, l)
        }
    };
    let objective = Objective::new(&tree, n, kind, Extension::Projected)?;
    let constraints = RecourseInstance::new(tree, operator, x_family, y_family, 2.0, PNorm::default())?;
    let problem = Problem::new(constraints, objective, l_phi.max(1e-12))?;
    Ok(GeneratedInstance { problem, reference })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::to_canonical_string;
    use crate::recourse::{restore_builtin, verify_recourse_constant, RecourseSampler};

    #[test]
    fn same_seed_same_file() {
        let spec = GeneratorSpec {
            operator: OperatorFamily::Smooth,
            ..GeneratorSpec::default()
        };
        let a = to_canonical_string(&generate(&spec).unwrap().to_file()).unwrap();
        let b = to_canonical_string(&generate(&spec).unwrap().to_file()).unwrap();
        assert_eq!(a, b);
        let other = GeneratorSpec { seed: 43, ..spec };
        assert_ne!(a, to_canonical_string(&generate(&other).unwrap().to_file()).unwrap());
    }

    #[test]
    fn reference_policy_is_feasible() {
        for operator in [OperatorFamily::Affine, OperatorFamily::Smooth] {
            for friendly in [true, false] {
                let spec = GeneratorSpec {
                    operator,
                    recourse_friendly: friendly,
                    sets: SetFamily::Polyhedron,
                    ..GeneratorSpec::default()
                };
                let g = generate(&spec).unwrap();
                let (phi, dx) = g.problem.constraints.infeasibility(&g.reference).unwrap();
                assert!(phi < 1e-12 && dx < 1e-12);
            }
        }
    }

    #[test]
    fn friendly_instances_restore_from_random_starts() {
        for seed in 0..4 {
            let spec = GeneratorSpec {
                seed,
                operator: if seed % 2 == 0 {
                    OperatorFamily::Affine
                } else {
                    OperatorFamily::Smooth
                },
                ..GeneratorSpec::default()
            };
            let g = generate(&spec).unwrap();
            let inst = &g.problem.constraints;
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            for _ in 0..100 {
                let u = AdaptedVector::from_fn(&inst.tree, Mode::Builtin, spec.n, |_, _| {
                    (0..spec.n).map(|_| rng.gen_range(-3.0..=3.0)).collect()
                });
                let report = restore_builtin(inst, &u).unwrap();
                assert!(report.final_infeasibility < 1e-9);
                assert!(report.max_node_ratio <= 1.0 + 1e-9);
            }
            let check = verify_recourse_constant(inst, 2.0, RecourseSampler::default(), 200, seed).unwrap();
            assert!(check.pass);
        }
    }

    #[test]
    fn one_stage_spec_is_deterministic_nlp() {
        let spec = GeneratorSpec {
            stages: 1,
            branching: vec![],
            ..GeneratorSpec::default()
        };
        let g = generate(&spec).unwrap();
        assert_eq!(g.problem.tree().num_scenarios(), 1);
        assert_eq!(g.problem.total_dimension(), spec.n);
    }

    #[test]
    fn bad_specs_are_rejected() {
        let spec = GeneratorSpec {
            branching: vec![2],
            ..GeneratorSpec::default()
        };
        assert!(generate(&spec).is_err());
        let spec = GeneratorSpec {
            n: 1,
            m: 2,
            ..GeneratorSpec::default()
        };
        assert!(generate(&spec).is_err());
    }
}
