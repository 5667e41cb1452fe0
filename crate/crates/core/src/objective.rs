//! Lipschitz objective functionals and their subgradients.
//!
//! Costs are given per stage and per scenario, so `c_t(·, ω)` may depend on
//! the whole scenario. Three kinds are supported: the expected cumulative
//! cost, the CVaR of the total cost, and nonnegative combinations of both.
//!
//! Subgradients follow one convention everywhere: node values are raw
//! Euclidean gradients and probability weights enter only through the
//! pairing. The subdifferential is exposed as an affine family
//! ([`SubgradientFamily`]) so that certificate checks and multiplier
//! recovery can work with CVaR ties.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapted::{
    conditional_expectation_builtin, lift, lp_norm, nonanticipativity_project, AdaptedVector, Mode, PNorm,
};
use crate::causal::{sigmoid, softplus};
use crate::error::{Error, Result};
use crate::tree::ScenarioTree;

/// A convex stage cost `c(ξ)` on `R^n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageCost {
    /// `Σ_i w_i (ξ_i - target_i)^2 + <linear, ξ>`, with `w >= 0`.
    Quadratic {
        weights: Vec<f64>,
        target: Vec<f64>,
        #[serde(default)]
        linear: Vec<f64>,
    },
    /// `softplus(<a, ξ> + b)`.
    SoftplusLinear { a: Vec<f64>, b: f64 },
    /// `<a, ξ>`.
    Linear { a: Vec<f64> },
}

impl StageCost {
    pub fn zero(n: usize) -> Self {
        StageCost::Linear { a: vec![0.0; n] }
    }

    fn validate(&self, n: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidObjective(msg));
        match self {
            StageCost::Quadratic { weights, target, linear } => {
                if weights.len() != n || target.len() != n || !(linear.is_empty() || linear.len() == n) {
                    return bad(format!("quadratic cost must have dimension {n}"));
                }
                if weights.iter().any(|w| !(*w >= 0.0)) {
                    return bad("quadratic weights must be nonnegative".into());
                }
            }
            StageCost::SoftplusLinear { a, .. } | StageCost::Linear { a } => {
                if a.len() != n {
                    return bad(format!("linear coefficient must have dimension {n}"));
                }
            }
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            StageCost::Quadratic { weights, target, linear } => {
                let quad: f64 = weights
                    .iter()
                    .zip(target)
                    .zip(x)
                    .map(|((w, c), v)| w * (v - c) * (v - c))
                    .sum();
                quad + linear.iter().zip(x).map(|(a, v)| a * v).sum::<f64>()
            }
            StageCost::SoftplusLinear { a, b } => softplus(dot(a, x) + b),
            StageCost::Linear { a } => dot(a, x),
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match self {
            StageCost::Quadratic { weights, target, linear } => (0..x.len())
                .map(|i| 2.0 * weights[i] * (x[i] - target[i]) + linear.get(i).copied().unwrap_or(0.0))
                .collect(),
            StageCost::SoftplusLinear { a, b } => {
                let s = sigmoid(dot(a, x) + b);
                a.iter().map(|v| s * v).collect()
            }
            StageCost::Linear { a } => a.clone(),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stage costs indexed `[stage][scenario]`.
pub type CostTable = Vec<Vec<StageCost>>;

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveKind {
    /// `E[Σ_t c_t(x_t(ω), ω)]`.
    Expected { costs: CostTable },
    /// `CVaR_α` of the total cost `Z(ω) = Σ_t c_t(x_t(ω), ω)`.
    Cvar { alpha: f64, costs: CostTable },
    /// `Σ_j w_j φ_j` with `w_j >= 0`.
    Composite { terms: Vec<(f64, ObjectiveKind)> },
}

/// How `φ` is extended to scenario-wise (relaxed) policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extension {
    /// `φ̃ = φ ∘ Π`.
    #[default]
    Projected,
    /// The same scenario-wise formula evaluated on the relaxed policy.
    Scenariowise,
}

/// An objective functional together with its relaxed extension.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    kind: ObjectiveKind,
    extension: Extension,
}

/// Affine description of a subdifferential:
/// `{ fixed + Σ_j θ_j dirs[j] : lower <= θ <= upper, eq_rows θ = eq_rhs }`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgradientFamily {
    pub fixed: AdaptedVector,
    pub dirs: Vec<AdaptedVector>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub eq_rows: Vec<Vec<f64>>,
    pub eq_rhs: Vec<f64>,
    /// A feasible parameter, the proportional tie split.
    pub start: Vec<f64>,
}

impl SubgradientFamily {
    pub fn element(&self, theta: &[f64]) -> AdaptedVector {
        let mut g = self.fixed.clone();
        for (d, th) in self.dirs.iter().zip(theta) {
            g.axpy(*th, d);
        }
        g
    }

    /// The designated subgradient.
    pub fn default_element(&self) -> AdaptedVector {
        self.element(&self.start)
    }
}

/// Exact CVaR weights `q` with `q ∈ [0, 1/α]` and `E[q] = 1`.
///
/// Returns the weights, the CVaR value `Σ p q Z`, and the scenarios of the
/// tie group that straddles the quantile (empty when no split is needed).
pub fn cvar_weights(probs: &[f64], losses: &[f64], alpha: f64) -> (Vec<f64>, f64, Vec<usize>) {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]));
    let mut q = vec![0.0; losses.len()];
    let mut covered = 0.0;
    let mut split = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let lead = losses[order[i]];
        let mut j = i;
        let mut mass = 0.0;
        while j < order.len() && (losses[order[j]] - lead).abs() <= TIE_TOL * (1.0 + lead.abs()) {
            mass += probs[order[j]];
            j += 1;
        }
        let group = &order[i..j];
        if covered + mass <= alpha + 1e-15 {
            group.iter().for_each(|&s| q[s] = 1.0 / alpha);
        } else if covered < alpha {
            let share = (alpha - covered) / (alpha * mass);
            group.iter().for_each(|&s| q[s] = share);
            if group.len() > 1 {
                split = group.to_vec();
            }
        }
        covered += mass;
        i = j;
    }
    let value = probs.iter().zip(&q).zip(losses).map(|((p, w), z)| p * w * z).sum();
    (q, value, split)
}

/// Losses within this relative distance of each other form a tie group.
pub const TIE_TOL: f64 = 1e-9;

fn scenario_costs(costs: &CostTable, x: &AdaptedVector, s: usize) -> f64 {
    (0..costs.len()).map(|t| costs[t][s].value(x.slot(t, s))).sum()
}

impl ObjectiveKind {
    fn validate(&self, tree: &ScenarioTree, n: usize) -> Result<()> {
        let check_costs = |costs: &CostTable| -> Result<()> {
            if costs.len() != tree.stages() || costs.iter().any(|c| c.len() != tree.num_scenarios()) {
                return Err(Error::InvalidObjective("cost table must be stages × scenarios".into()));
            }
            costs.iter().flatten().try_for_each(|c| c.validate(n))
        };
        match self {
            ObjectiveKind::Expected { costs } => check_costs(costs),
            ObjectiveKind::Cvar { alpha, costs } => {
                if !(*alpha > 0.0 && *alpha <= 1.0) {
                    return Err(Error::InvalidObjective(format!("alpha must lie in (0, 1], got {alpha}")));
                }
                check_costs(costs)
            }
            ObjectiveKind::Composite { terms } => {
                if terms.is_empty() {
                    return Err(Error::InvalidObjective("composite objective has no terms".into()));
                }
                for (w, k) in terms {
                    if !(*w >= 0.0) {
                        return Err(Error::InvalidObjective("composite weights must be nonnegative".into()));
                    }
                    k.validate(tree, n)?;
                }
                Ok(())
            }
        }
    }

    // `xr` is a relaxed policy; costs are evaluated scenario by scenario.
    fn value(&self, tree: &ScenarioTree, xr: &AdaptedVector) -> f64 {
        match self {
            ObjectiveKind::Expected { costs } => (0..tree.num_scenarios())
                .map(|s| tree.scenario_prob(s) * scenario_costs(costs, xr, s))
                .sum(),
            ObjectiveKind::Cvar { alpha, costs } => {
                let (probs, losses) = self.losses(tree, costs, xr);
                cvar_weights(&probs, &losses, *alpha).1
            }
            ObjectiveKind::Composite { terms } => terms.iter().map(|(w, k)| w * k.value(tree, xr)).sum(),
        }
    }

    fn losses(&self, tree: &ScenarioTree, costs: &CostTable, xr: &AdaptedVector) -> (Vec<f64>, Vec<f64>) {
        let probs = (0..tree.num_scenarios()).map(|s| tree.scenario_prob(s)).collect();
        let losses = (0..tree.num_scenarios()).map(|s| scenario_costs(costs, xr, s)).collect();
        (probs, losses)
    }

    // Raw scenario-wise gradient family at relaxed `xr`, scaled by `weight`.
    fn raw_family(&self, tree: &ScenarioTree, xr: &AdaptedVector, weight: f64, fam: &mut SubgradientFamily) {
        let grad_into = |costs: &CostTable, s: usize, scale: f64, out: &mut AdaptedVector| {
            for (t, stage_costs) in costs.iter().enumerate() {
                let g = stage_costs[s].gradient(xr.slot(t, s));
                for (o, v) in out.slot_mut(t, s).iter_mut().zip(&g) {
                    *o += scale * v;
                }
            }
        };
        match self {
            ObjectiveKind::Expected { costs } => {
                for s in 0..tree.num_scenarios() {
                    grad_into(costs, s, weight, &mut fam.fixed);
                }
            }
            ObjectiveKind::Cvar { alpha, costs } => {
                let (probs, losses) = self.losses(tree, costs, xr);
                let (q, _, split) = cvar_weights(&probs, &losses, *alpha);
                for s in 0..tree.num_scenarios() {
                    if !split.contains(&s) {
                        grad_into(costs, s, weight * q[s], &mut fam.fixed);
                    }
                }
                if !split.is_empty() {
                    let first = fam.dirs.len();
                    let mut row = vec![0.0; first];
                    for &s in &split {
                        let mut d = AdaptedVector::zeros(tree, Mode::Relaxed, xr.dim());
                        grad_into(costs, s, weight, &mut d);
                        fam.dirs.push(d);
                        fam.lower.push(0.0);
                        fam.upper.push(1.0 / alpha);
                        fam.start.push(q[s]);
                        row.push(probs[s]);
                    }
                    let rhs = split.iter().map(|&s| probs[s] * q[s]).sum();
                    for r in &mut fam.eq_rows {
                        r.resize(fam.dirs.len(), 0.0);
                    }
                    fam.eq_rows.push(row);
                    fam.eq_rhs.push(rhs);
                }
            }
            ObjectiveKind::Composite { terms } => {
                for (w, k) in terms {
                    k.raw_family(tree, xr, weight * w, fam);
                }
            }
        }
        let width = fam.dirs.len();
        for r in &mut fam.eq_rows {
            r.resize(width, 0.0);
        }
    }
}

impl Objective {
    pub fn new(tree: &ScenarioTree, n: usize, kind: ObjectiveKind, extension: Extension) -> Result<Self> {
        kind.validate(tree, n)?;
        Ok(Self { kind, extension })
    }

    pub fn kind(&self) -> &ObjectiveKind {
        &self.kind
    }

    pub fn extension(&self) -> Extension {
        self.extension
    }

    // Relaxed point where the costs are evaluated.
    fn evaluation_point(&self, tree: &ScenarioTree, x: &AdaptedVector) -> Result<AdaptedVector> {
        match (x.mode(), self.extension) {
            (Mode::Builtin, _) => Ok(lift(tree, x)),
            (Mode::Relaxed, Extension::Projected) => nonanticipativity_project(tree, x),
            (Mode::Relaxed, Extension::Scenariowise) => Ok(x.clone()),
        }
    }

    /// `φ(x)` for builtin `x`, `φ̃(x)` for relaxed `x`.
    pub fn value(&self, tree: &ScenarioTree, x: &AdaptedVector) -> Result<f64> {
        let xr = self.evaluation_point(tree, x)?;
        Ok(self.kind.value(tree, &xr))
    }

    /// The subdifferential at `x` as an affine family in the mode of `x`.
    pub fn subgradient_family(&self, tree: &ScenarioTree, x: &AdaptedVector) -> Result<SubgradientFamily> {
        let xr = self.evaluation_point(tree, x)?;
        let mut fam = SubgradientFamily {
            fixed: AdaptedVector::zeros(tree, Mode::Relaxed, x.dim()),
            dirs: Vec::new(),
            lower: Vec::new(),
            upper: Vec::new(),
            eq_rows: Vec::new(),
            eq_rhs: Vec::new(),
            start: Vec::new(),
        };
        self.kind.raw_family(tree, &xr, 1.0, &mut fam);
        let convert = |v: &AdaptedVector| -> Result<AdaptedVector> {
            match (x.mode(), self.extension) {
                (Mode::Builtin, _) => conditional_expectation_builtin(tree, v),
                (Mode::Relaxed, Extension::Projected) => nonanticipativity_project(tree, v),
                (Mode::Relaxed, Extension::Scenariowise) => Ok(v.clone()),
            }
        };
        fam.fixed = convert(&fam.fixed)?;
        fam.dirs = fam.dirs.iter().map(convert).collect::<Result<_>>()?;
        Ok(fam)
    }

    /// One subgradient, with CVaR ties split proportionally.
    pub fn subgradient(&self, tree: &ScenarioTree, x: &AdaptedVector) -> Result<AdaptedVector> {
        Ok(self.subgradient_family(tree, x)?.default_element())
    }

    /// Largest sampled `|φ(x) - φ(z)| / ||x - z||_p` over builtin points in
    /// `[-radius, radius]`.
    pub fn audit_lipschitz(
        &self,
        tree: &ScenarioTree,
        n: usize,
        radius: f64,
        samples: usize,
        seed: u64,
        p: PNorm,
    ) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| {
            AdaptedVector::from_fn(tree, Mode::Builtin, n, |_, _| {
                (0..n).map(|_| rng.gen_range(-radius..=radius)).collect()
            })
        };
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let x = draw(&mut rng);
            let z = draw(&mut rng);
            let dist = lp_norm(tree, &(&x - &z), p);
            if dist > 0.0 {
                worst = worst.max((self.value(tree, &x)? - self.value(tree, &z)?).abs() / dist);
            }
        }
        Ok(worst)
    }

    pub fn to_spec(&self, tree: &ScenarioTree) -> ObjectiveSpec {
        ObjectiveSpec {
            body: kind_to_spec(tree, &self.kind),
            extension: self.extension,
        }
    }

    pub fn from_spec(tree: &ScenarioTree, n: usize, spec: &ObjectiveSpec) -> Result<Self> {
        let kind = kind_from_spec(tree, &spec.body, "/objective")?;
        Self::new(tree, n, kind, spec.extension)
    }
}

/// JSON form of an objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    #[serde(flatten)]
    pub body: ObjectiveBodySpec,
    #[serde(default)]
    pub extension: Extension,
}

/// Per-stage maps from scenario (leaf node) id to cost; the key `"*"`
/// applies to every scenario not listed explicitly.
pub type CostTableSpec = Vec<BTreeMap<String, StageCost>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ObjectiveBodySpec {
    Expected { costs: CostTableSpec },
    Cvar { alpha: f64, costs: CostTableSpec },
    Composite { terms: Vec<CompositeTermSpec> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeTermSpec {
    pub weight: f64,
    pub objective: ObjectiveBodySpec,
}

fn costs_from_spec(tree: &ScenarioTree, spec: &CostTableSpec, pointer: &str) -> Result<CostTable> {
    if spec.len() != tree.stages() {
        return Err(Error::schema(
            format!("{pointer}/costs"),
            format!("expected {} stages, found {}", tree.stages(), spec.len()),
        ));
    }
    let mut table = Vec::with_capacity(spec.len());
    for (t, stage) in spec.iter().enumerate() {
        for key in stage.keys() {
            if key == "*" {
                continue;
            }
            let known = key
                .parse::<u64>()
                .ok()
                .and_then(|id| tree.node_index(id))
                .is_some_and(|node| tree.node_stage(node) + 1 == tree.stages());
            if !known {
                return Err(Error::schema(
                    format!("{pointer}/costs/{t}/{key}"),
                    format!("node {key} is not a scenario of the tree"),
                ));
            }
        }
        let mut row = Vec::with_capacity(tree.num_scenarios());
        for s in 0..tree.num_scenarios() {
            let id = tree.node_id(tree.scenario_node(s)).to_string();
            let cost = stage.get(&id).or_else(|| stage.get("*")).ok_or_else(|| {
                Error::schema(
                    format!("{pointer}/costs/{t}"),
                    format!("no cost for scenario {id} and no \"*\" default"),
                )
            })?;
            row.push(cost.clone());
        }
        table.push(row);
    }
    Ok(table)
}

fn costs_to_spec(tree: &ScenarioTree, costs: &CostTable) -> CostTableSpec {
    costs
        .iter()
        .map(|row| {
            let first = &row[0];
            if row.iter().all(|c| c == first) {
                BTreeMap::from([("*".to_string(), first.clone())])
            } else {
                row.iter()
                    .enumerate()
                    .map(|(s, c)| (tree.node_id(tree.scenario_node(s)).to_string(), c.clone()))
                    .collect()
            }
        })
        .collect()
}

fn kind_from_spec(tree: &ScenarioTree, spec: &ObjectiveBodySpec, pointer: &str) -> Result<ObjectiveKind> {
    Ok(match spec {
        ObjectiveBodySpec::Expected { costs } => ObjectiveKind::Expected {
            costs: costs_from_spec(tree, costs, pointer)?,
        },
        ObjectiveBodySpec::Cvar { alpha, costs } => ObjectiveKind::Cvar {
            alpha: *alpha,
            costs: costs_from_spec(tree, costs, pointer)?,
        },
        ObjectiveBodySpec::Composite { terms } => ObjectiveKind::Composite {
            terms: terms
                .iter()
                .enumerate()
                .map(|(j, term)| {
                    kind_from_spec(tree, &term.objective, &format!("{pointer}/terms/{j}/objective"))
                        .map(|k| (term.weight, k))
                })
                .collect::<Result<_>>()?,
        },
    })
}

fn kind_to_spec(tree: &ScenarioTree, kind: &ObjectiveKind) -> ObjectiveBodySpec {
    match kind {
        ObjectiveKind::Expected { costs } => ObjectiveBodySpec::Expected {
            costs: costs_to_spec(tree, costs),
        },
        ObjectiveKind::Cvar { alpha, costs } => ObjectiveBodySpec::Cvar {
            alpha: *alpha,
            costs: costs_to_spec(tree, costs),
        },
        ObjectiveKind::Composite { terms } => ObjectiveBodySpec::Composite {
            terms: terms
                .iter()
                .map(|(w, k)| CompositeTermSpec {
                    weight: *w,
                    objective: kind_to_spec(tree, k),
                })
                .collect(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapted::inner_product;

    fn square_costs(tree: &ScenarioTree, targets: &[f64]) -> CostTable {
        (0..tree.stages())
            .map(|_| {
                targets
                    .iter()
                    .map(|c| StageCost::Quadratic {
                        weights: vec![1.0],
                        target: vec![*c],
                        linear: vec![],
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn cvar_examples() {
        let (q, v, split) = cvar_weights(&[0.5, 0.5], &[1.0, 3.0], 0.5);
        assert_eq!(q, vec![0.0, 2.0]);
        assert_eq!(v, 3.0);
        assert!(split.is_empty());
        let (q, v, _) = cvar_weights(&[0.5, 0.5], &[1.0, 3.0], 1.0);
        assert_eq!(q, vec![1.0, 1.0]);
        assert_eq!(v, 2.0);
        let (q, v, split) = cvar_weights(&[0.25, 0.25, 0.5], &[2.0, 2.0, 0.0], 0.25);
        assert_eq!(q, vec![2.0, 2.0, 0.0]);
        assert_eq!(v, 2.0);
        assert_eq!(split.len(), 2);
    }

    #[test]
    fn cvar_value_matches_rockafellar_uryasev() {
        // min_η η + E[(Z-η)_+]/α, minimized over the atoms
        let probs = [0.1, 0.2, 0.3, 0.4];
        let losses = [4.0_f64, -1.0, 2.5, 0.5];
        for alpha in [0.05, 0.1, 0.25, 0.5, 0.9, 1.0] {
            let ru = losses
                .iter()
                .map(|eta| {
                    eta + probs
                        .iter()
                        .zip(&losses)
                        .map(|(p, z)| p * (z - eta).max(0.0_f64))
                        .sum::<f64>()
                        / alpha
                })
                .fold(f64::INFINITY, f64::min);
            let (q, v, _) = cvar_weights(&probs, &losses, alpha);
            assert!((v - ru).abs() < 1e-12, "alpha {alpha}: {v} vs {ru}");
            let mass: f64 = probs.iter().zip(&q).map(|(p, q)| p * q).sum();
            assert!((mass - 1.0).abs() < 1e-12);
            assert!(q.iter().all(|w| *w >= 0.0 && *w <= 1.0 / alpha + 1e-12));
        }
    }

    #[test]
    fn expected_value_and_stationary_gradient() {
        let tree = ScenarioTree::uniform(&[2]).unwrap();
        let obj = Objective::new(
            &tree,
            1,
            ObjectiveKind::Expected {
                costs: square_costs(&tree, &[1.0, 3.0]),
            },
            Extension::Projected,
        )
        .unwrap();
        let zero = AdaptedVector::zeros(&tree, Mode::Builtin, 1);
        assert_eq!(obj.value(&tree, &zero).unwrap(), 2.0 * (0.5 + 4.5));
        // stage-1 minimizer is E[c] = 2, stage-2 minimizers are c(ω)
        let opt = AdaptedVector::from_stages(&tree, Mode::Builtin, 1, vec![vec![2.0], vec![1.0, 3.0]]).unwrap();
        assert_eq!(obj.subgradient(&tree, &opt).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn cvar_subgradient_concentrates_on_worst() {
        let tree = ScenarioTree::uniform(&[2]).unwrap();
        let costs: CostTable = vec![
            vec![StageCost::zero(1), StageCost::zero(1)],
            vec![StageCost::Linear { a: vec![1.0] }, StageCost::Linear { a: vec![1.0] }],
        ];
        let obj = Objective::new(&tree, 1, ObjectiveKind::Cvar { alpha: 0.5, costs }, Extension::Projected).unwrap();
        let x = AdaptedVector::from_stages(&tree, Mode::Builtin, 1, vec![vec![0.0], vec![1.0, 3.0]]).unwrap();
        assert_eq!(obj.value(&tree, &x).unwrap(), 3.0);
        let g = obj.subgradient(&tree, &x).unwrap();
        assert_eq!(g.stage(1), &[0.0, 2.0]);
    }

    #[test]
    fn extension_agrees_on_nonanticipative_policies() {
        let tree = ScenarioTree::uniform(&[2, 2]).unwrap();
        for extension in [Extension::Projected, Extension::Scenariowise] {
            let obj = Objective::new(
                &tree,
                1,
                ObjectiveKind::Cvar {
                    alpha: 0.3,
                    costs: square_costs(&tree, &[0.0, 1.0, -1.0, 2.0]),
                },
                extension,
            )
            .unwrap();
            let x = AdaptedVector::from_fn(&tree, Mode::Builtin, 1, |t, k| vec![0.1 * (t * 3 + k) as f64]);
            let a = obj.value(&tree, &x).unwrap();
            let b = obj.value(&tree, &lift(&tree, &x)).unwrap();
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn subgradient_inequality_for_convex_costs() {
        let tree = ScenarioTree::uniform(&[3]).unwrap();
        let obj = Objective::new(
            &tree,
            1,
            ObjectiveKind::Composite {
                terms: vec![
                    (
                        0.5,
                        ObjectiveKind::Cvar {
                            alpha: 0.4,
                            costs: square_costs(&tree, &[0.0, 1.0, 2.0]),
                        },
                    ),
                    (
                        1.0,
                        ObjectiveKind::Expected {
                            costs: (0..2)
                                .map(|_| vec![StageCost::SoftplusLinear { a: vec![1.5], b: -0.2 }; 3])
                                .collect(),
                        },
                    ),
                ],
            },
            Extension::Projected,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mut draw = || {
                AdaptedVector::from_fn(&tree, Mode::Builtin, 1, |_, _| vec![rng.gen_range(-2.0..2.0)])
            };
            let x = draw();
            let y = draw();
            let g = obj.subgradient(&tree, &x).unwrap();
            let lhs = obj.value(&tree, &y).unwrap();
            let rhs = obj.value(&tree, &x).unwrap() + inner_product(&tree, &g, &(&y - &x)).unwrap();
            assert!(lhs >= rhs - 1e-10, "{lhs} < {rhs}");
        }
    }

    #[test]
    fn spec_round_trip_with_defaults() {
        let tree = ScenarioTree::uniform(&[2]).unwrap();
        let json = r#"{"kind":"expected","costs":[
            {"*":{"kind":"quadratic","weights":[1.0],"target":[0.0]}},
            {"1":{"kind":"linear","a":[1.0]},"*":{"kind":"linear","a":[2.0]}}]}"#;
        let spec: ObjectiveSpec = serde_json::from_str(json).unwrap();
        let obj = Objective::from_spec(&tree, 1, &spec).unwrap();
        assert_eq!(obj.extension(), Extension::Projected);
        let back = Objective::from_spec(&tree, 1, &obj.to_spec(&tree)).unwrap();
        assert_eq!(back, obj);
        let bad = r#"{"kind":"expected","costs":[{"*":{"kind":"linear","a":[1.0]}},{"0":{"kind":"linear","a":[1.0]}}]}"#;
        let spec: ObjectiveSpec = serde_json::from_str(bad).unwrap();
        assert!(matches!(Objective::from_spec(&tree, 1, &spec), Err(Error::Schema { .. })));
    }
}
