//! Adapted vectors on a scenario tree and their `L_p` geometry.
//!
//! A [`Mode::Builtin`] vector stores one value per stage-`t` node, so
//! `F_t`-measurability is structural. A [`Mode::Relaxed`] vector stores one
//! value per scenario at every stage. Values are raw Euclidean coordinates;
//! probability weights enter only through [`inner_product`] and the norms.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::ScenarioTree;

/// Gap below which a relaxed vector is accepted as nonanticipative.
pub const COLLAPSE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Builtin,
    Relaxed,
}

/// Exponent of an `L_p` norm, `p >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct PNorm(f64);

impl PNorm {
    pub fn new(p: f64) -> Result<Self> {
        if p >= 1.0 && p.is_finite() {
            Ok(Self(p))
        } else {
            Err(Error::InvalidNorm(p))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_two(self) -> bool {
        self.0 == 2.0
    }

    /// Aggregates weighted Euclidean magnitudes `(sum w |a|^p)^{1/p}`.
    pub fn aggregate(self, terms: impl IntoIterator<Item = (f64, f64)>) -> f64 {
        let p = self.0;
        let mut acc = 0.0;
        for (w, a) in terms {
            if a != 0.0 {
                acc += w * a.abs().powf(p);
            }
        }
        acc.powf(1.0 / p)
    }
}

impl Default for PNorm {
    fn default() -> Self {
        Self(2.0)
    }
}

impl TryFrom<f64> for PNorm {
    type Error = Error;
    fn try_from(p: f64) -> Result<Self> {
        Self::new(p)
    }
}

impl From<PNorm> for f64 {
    fn from(p: PNorm) -> f64 {
        p.0
    }
}

/// Per-stage, per-slot vectors of a common dimension.
///
/// Slot `k` at stage `t` is the `k`-th stage-`t` node (builtin) or the
/// `k`-th scenario (relaxed). Stage data is stored row-major, `slots * dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedVector {
    mode: Mode,
    dim: usize,
    stages: Vec<Vec<f64>>,
}

impl AdaptedVector {
    pub fn zeros(tree: &ScenarioTree, mode: Mode, dim: usize) -> Self {
        let stages = (0..tree.stages())
            .map(|t| vec![0.0; slot_count(tree, mode, t) * dim])
            .collect();
        Self { mode, dim, stages }
    }

    /// Builds a vector from `f(stage, slot) -> value`.
    pub fn from_fn(
        tree: &ScenarioTree,
        mode: Mode,
        dim: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Self {
        let mut v = Self::zeros(tree, mode, dim);
        for t in 0..tree.stages() {
            for k in 0..v.slots(t) {
                let value = f(t, k);
                assert_eq!(value.len(), dim, "from_fn produced a vector of the wrong size");
                v.slot_mut(t, k).copy_from_slice(&value);
            }
        }
        v
    }

    /// Entries drawn uniformly from `[-radius, radius]`.
    pub fn random(tree: &ScenarioTree, mode: Mode, dim: usize, radius: f64, rng: &mut impl rand::Rng) -> Self {
        Self::from_fn(tree, mode, dim, |_, _| (0..dim).map(|_| rng.gen_range(-radius..=radius)).collect())
    }

    /// `count` vectors from [`Self::random`] with a seeded generator.
    pub fn random_batch(
        tree: &ScenarioTree,
        mode: Mode,
        dim: usize,
        radius: f64,
        count: usize,
        seed: u64,
    ) -> Vec<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| Self::random(tree, mode, dim, radius, &mut rng)).collect()
    }

    /// Wraps raw stage data, checking the layout against the tree.
    pub fn from_stages(
        tree: &ScenarioTree,
        mode: Mode,
        dim: usize,
        stages: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if stages.len() != tree.stages() {
            return Err(Error::DimensionMismatch {
                context: "adapted vector stage count",
                expected: tree.stages(),
                found: stages.len(),
            });
        }
        for (t, data) in stages.iter().enumerate() {
            let expected = slot_count(tree, mode, t) * dim;
            if data.len() != expected {
                return Err(Error::DimensionMismatch {
                    context: "adapted vector stage data",
                    expected,
                    found: data.len(),
                });
            }
        }
        Ok(Self { mode, dim, stages })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn slots(&self, t: usize) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.stages[t].len() / self.dim
        }
    }

    pub fn slot(&self, t: usize, k: usize) -> &[f64] {
        &self.stages[t][k * self.dim..(k + 1) * self.dim]
    }

    pub fn slot_mut(&mut self, t: usize, k: usize) -> &mut [f64] {
        let d = self.dim;
        &mut self.stages[t][k * d..(k + 1) * d]
    }

    pub fn stage(&self, t: usize) -> &[f64] {
        &self.stages[t]
    }

    pub fn stage_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.stages[t]
    }

    pub fn into_stages(self) -> Vec<Vec<f64>> {
        self.stages
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.mode == other.mode
            && self.dim == other.dim
            && self.stages.len() == other.stages.len()
            && self
                .stages
                .iter()
                .zip(&other.stages)
                .all(|(a, b)| a.len() == b.len())
    }

    /// `self += a * other`. Panics on shape mismatch.
    pub fn axpy(&mut self, a: f64, other: &Self) {
        assert!(self.same_shape(other), "axpy on vectors of different shape");
        for (x, y) in self.stages.iter_mut().zip(&other.stages) {
            for (u, v) in x.iter_mut().zip(y) {
                *u += a * v;
            }
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            mode: self.mode,
            dim: self.dim,
            stages: self
                .stages
                .iter()
                .map(|s| s.iter().map(|&v| f(v)).collect())
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.stages
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Keeps only stage `t` (other stages zeroed).
    pub fn restrict_to_stage(&self, t: usize) -> Self {
        let mut out = self.map(|_| 0.0);
        out.stages[t].copy_from_slice(&self.stages[t]);
        out
    }
}

fn zip_with(a: &AdaptedVector, b: &AdaptedVector, f: impl Fn(f64, f64) -> f64) -> AdaptedVector {
    assert!(a.same_shape(b), "arithmetic on adapted vectors of different shape");
    AdaptedVector {
        mode: a.mode,
        dim: a.dim,
        stages: a
            .stages
            .iter()
            .zip(&b.stages)
            .map(|(x, y)| x.iter().zip(y).map(|(&u, &v)| f(u, v)).collect())
            .collect(),
    }
}

impl Add for &AdaptedVector {
    type Output = AdaptedVector;
    fn add(self, rhs: Self) -> AdaptedVector {
        zip_with(self, rhs, |u, v| u + v)
    }
}

impl Sub for &AdaptedVector {
    type Output = AdaptedVector;
    fn sub(self, rhs: Self) -> AdaptedVector {
        zip_with(self, rhs, |u, v| u - v)
    }
}

impl Mul<f64> for &AdaptedVector {
    type Output = AdaptedVector;
    fn mul(self, rhs: f64) -> AdaptedVector {
        self.map(|v| v * rhs)
    }
}

impl Neg for &AdaptedVector {
    type Output = AdaptedVector;
    fn neg(self) -> AdaptedVector {
        self.map(|v| -v)
    }
}

/// Number of slots at stage `t` for the given mode.
pub fn slot_count(tree: &ScenarioTree, mode: Mode, t: usize) -> usize {
    match mode {
        Mode::Builtin => tree.stage_nodes(t).len(),
        Mode::Relaxed => tree.num_scenarios(),
    }
}

/// Probability mass carried by a slot.
pub fn slot_prob(tree: &ScenarioTree, mode: Mode, t: usize, k: usize) -> f64 {
    match mode {
        Mode::Builtin => tree.node_prob(tree.stage_nodes(t)[k]),
        Mode::Relaxed => tree.scenario_prob(k),
    }
}

/// Node index whose data (sets, maps) governs slot `k` at stage `t`.
pub fn slot_node(tree: &ScenarioTree, mode: Mode, t: usize, k: usize) -> usize {
    match mode {
        Mode::Builtin => tree.stage_nodes(t)[k],
        Mode::Relaxed => tree.ancestor(tree.scenario_node(k), t),
    }
}

/// Slot at stage `s <= t` that is the history of slot `k` at stage `t`.
pub fn history_slot(tree: &ScenarioTree, mode: Mode, t: usize, k: usize, s: usize) -> usize {
    match mode {
        Mode::Builtin => tree.local_index(tree.ancestor(tree.stage_nodes(t)[k], s)),
        Mode::Relaxed => k,
    }
}

fn check_vector(tree: &ScenarioTree, v: &AdaptedVector) -> Result<()> {
    if v.num_stages() != tree.stages() {
        return Err(Error::DimensionMismatch {
            context: "adapted vector stage count",
            expected: tree.stages(),
            found: v.num_stages(),
        });
    }
    for t in 0..tree.stages() {
        let expected = slot_count(tree, v.mode, t) * v.dim;
        if v.stages[t].len() != expected {
            return Err(Error::DimensionMismatch {
                context: "adapted vector stage data",
                expected,
                found: v.stages[t].len(),
            });
        }
    }
    Ok(())
}

/// Copies every node value to all scenarios below the node.
pub fn lift(tree: &ScenarioTree, v: &AdaptedVector) -> AdaptedVector {
    match v.mode {
        Mode::Relaxed => v.clone(),
        Mode::Builtin => AdaptedVector::from_fn(tree, Mode::Relaxed, v.dim, |t, s| {
            v.slot(t, tree.scenario_ancestor_local(s, t)).to_vec()
        }),
    }
}

/// Identifies a nonanticipative relaxed vector with a builtin one.
pub fn collapse(tree: &ScenarioTree, v: &AdaptedVector) -> Result<AdaptedVector> {
    match v.mode {
        Mode::Builtin => Ok(v.clone()),
        Mode::Relaxed => {
            let gap = nonanticipativity_gap(tree, v, PNorm::default())?;
            if gap > COLLAPSE_TOL {
                return Err(Error::ModeMismatch(format!(
                    "cannot collapse a relaxed vector with nonanticipativity gap {gap:e}"
                )));
            }
            Ok(AdaptedVector::from_fn(tree, Mode::Builtin, v.dim, |t, k| {
                let node = tree.stage_nodes(t)[k];
                v.slot(t, tree.scenarios_below(node)[0]).to_vec()
            }))
        }
    }
}

/// Conditional expectation given the stage-`t` partition, applied to
/// every stage component of a relaxed vector.
pub fn conditional_expectation(
    tree: &ScenarioTree,
    v: &AdaptedVector,
    t: usize,
) -> Result<AdaptedVector> {
    tree.check_stage(t)?;
    require_relaxed(v, "conditional expectation")?;
    check_vector(tree, v)?;
    let mut out = v.clone();
    for s in 0..tree.stages() {
        average_stage(tree, v, &mut out, s, t);
    }
    Ok(out)
}

/// Π: stage-wise conditional expectations `(E_1[x_1], ..., E_T[x_T])`.
pub fn nonanticipativity_project(tree: &ScenarioTree, x: &AdaptedVector) -> Result<AdaptedVector> {
    require_relaxed(x, "nonanticipativity projection")?;
    check_vector(tree, x)?;
    let mut out = x.clone();
    for t in 0..tree.stages() {
        average_stage(tree, x, &mut out, t, t);
    }
    Ok(out)
}

// Replaces stage `s` of `out` with E_t of stage `s` of `v`.
fn average_stage(tree: &ScenarioTree, v: &AdaptedVector, out: &mut AdaptedVector, s: usize, t: usize) {
    for &node in tree.stage_nodes(t) {
        let mean = node_average(tree, v, s, node);
        for &sc in tree.scenarios_below(node) {
            out.slot_mut(s, sc).copy_from_slice(&mean);
        }
    }
}

// Probability-weighted mean of stage `s` over the scenarios below `node`.
// Deviations are accumulated around the first scenario's value, so a block
// that is already constant averages to itself exactly.
fn node_average(tree: &ScenarioTree, v: &AdaptedVector, s: usize, node: usize) -> Vec<f64> {
    let below = tree.scenarios_below(node);
    let anchor = v.slot(s, below[0]);
    let mut acc = vec![0.0; v.dim];
    for &sc in &below[1..] {
        let p = tree.scenario_prob(sc);
        for ((a, x), x0) in acc.iter_mut().zip(v.slot(s, sc)).zip(anchor) {
            *a += p * (x - x0);
        }
    }
    let mass = tree.node_prob(node);
    anchor.iter().zip(&acc).map(|(x0, a)| x0 + a / mass).collect()
}

/// Stage-wise conditional expectation returned in builtin layout:
/// slot `k` of stage `t` holds `E_t[v_t]` at the `k`-th stage-`t` node.
pub fn conditional_expectation_builtin(tree: &ScenarioTree, v: &AdaptedVector) -> Result<AdaptedVector> {
    match v.mode {
        Mode::Builtin => Ok(v.clone()),
        Mode::Relaxed => {
            check_vector(tree, v)?;
            Ok(AdaptedVector::from_fn(tree, Mode::Builtin, v.dim, |t, k| {
                node_average(tree, v, t, tree.stage_nodes(t)[k])
            }))
        }
    }
}

fn require_relaxed(v: &AdaptedVector, what: &str) -> Result<()> {
    if v.mode != Mode::Relaxed {
        return Err(Error::ModeMismatch(format!("{what} needs a relaxed vector")));
    }
    Ok(())
}

fn euclid(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `(sum_ω p(ω) ||v(ω)||^p)^{1/p}` with `v(ω)` the stacked values of all
/// stages along scenario ω.
pub fn lp_norm(tree: &ScenarioTree, v: &AdaptedVector, p: PNorm) -> f64 {
    let lifted = lift(tree, v);
    p.aggregate((0..tree.num_scenarios()).map(|s| {
        let sq: f64 = (0..tree.stages())
            .map(|t| lifted.slot(t, s).iter().map(|x| x * x).sum::<f64>())
            .sum();
        (tree.scenario_prob(s), sq.sqrt())
    }))
}

/// `L_p` norm of the stage-`t` component.
pub fn stage_norm(tree: &ScenarioTree, v: &AdaptedVector, t: usize, p: PNorm) -> f64 {
    p.aggregate((0..v.slots(t)).map(|k| (slot_prob(tree, v.mode, t, k), euclid(v.slot(t, k)))))
}

/// Probability-weighted bilinear form `sum_ω p(ω) y(ω)^T x(ω)`.
/// A builtin operand is lifted when the modes differ.
pub fn inner_product(tree: &ScenarioTree, y: &AdaptedVector, x: &AdaptedVector) -> Result<f64> {
    if y.dim != x.dim {
        return Err(Error::DimensionMismatch {
            context: "inner product",
            expected: y.dim,
            found: x.dim,
        });
    }
    check_vector(tree, y)?;
    check_vector(tree, x)?;
    if y.mode != x.mode {
        return inner_product(tree, &lift(tree, y), &lift(tree, x));
    }
    let mut total = 0.0;
    for t in 0..tree.stages() {
        for k in 0..y.slots(t) {
            let dot: f64 = y.slot(t, k).iter().zip(x.slot(t, k)).map(|(a, b)| a * b).sum();
            total += slot_prob(tree, y.mode, t, k) * dot;
        }
    }
    Ok(total)
}

/// `sum_t ||x_t - E_t[x_t]||_p`; zero exactly on nonanticipative vectors.
pub fn nonanticipativity_gap(tree: &ScenarioTree, x: &AdaptedVector, p: PNorm) -> Result<f64> {
    if x.mode == Mode::Builtin {
        check_vector(tree, x)?;
        return Ok(0.0);
    }
    let projected = nonanticipativity_project(tree, x)?;
    let diff = x - &projected;
    Ok((0..tree.stages()).map(|t| stage_norm(tree, &diff, t, p)).sum())
}

/// Per-stage gaps `||x_t - E_t[x_t]||_p`.
pub fn stage_gaps(tree: &ScenarioTree, x: &AdaptedVector, p: PNorm) -> Result<Vec<f64>> {
    if x.mode == Mode::Builtin {
        return Ok(vec![0.0; tree.stages()]);
    }
    let projected = nonanticipativity_project(tree, x)?;
    let diff = x - &projected;
    Ok((0..tree.stages()).map(|t| stage_norm(tree, &diff, t, p)).collect())
}

/// `sum_t ||a_t - b_t||_p`, the distance used for restoration bounds.
pub fn stagewise_distance(tree: &ScenarioTree, a: &AdaptedVector, b: &AdaptedVector, p: PNorm) -> f64 {
    let (a, b) = if a.mode == b.mode {
        (a.clone(), b.clone())
    } else {
        (lift(tree, a), lift(tree, b))
    };
    let diff = &a - &b;
    (0..tree.stages()).map(|t| stage_norm(tree, &diff, t, p)).sum()
}
