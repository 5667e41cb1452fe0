//! Causal operators `F_t(x)(ω) = f_t(x_{1:t}(ω), ω)` on a scenario tree.
//!
//! Every stage-`t` node carries a [`StageMap`] from the stacked history
//! `z = (ξ_1, ..., ξ_t) ∈ R^{n t}` to `R^m`. The maps come from a small
//! library with analytic Jacobians and computable derivative bounds:
//!
//! * affine: `A z + b`
//! * componentwise: `A z + b + W σ(M z + c)` with `σ ∈ {sin, tanh, softplus}`
//! * bilinear: `A z + b + W (tanh(P z + p) ⊙ tanh(Q z + q))`
//!
//! Causality is structural: a stage-`t` map never sees later decisions.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapted::{history_slot, lp_norm, slot_node, slot_prob, AdaptedVector, Mode, PNorm};
use crate::error::{Error, Result};
use crate::qp::spectral_norm;
use crate::tree::ScenarioTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Sin,
    Tanh,
    Softplus,
}

impl Nonlinearity {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "sin" => Ok(Self::Sin),
            "tanh" => Ok(Self::Tanh),
            "softplus" => Ok(Self::Softplus),
            other => Err(Error::UnknownNonlinearity(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sin => "sin",
            Self::Tanh => "tanh",
            Self::Softplus => "softplus",
        }
    }

    fn value(self, v: f64) -> f64 {
        match self {
            Self::Sin => v.sin(),
            Self::Tanh => v.tanh(),
            Self::Softplus => softplus(v),
        }
    }

    // All three have |σ'| <= 1.
    fn derivative(self, v: f64) -> f64 {
        match self {
            Self::Sin => v.cos(),
            Self::Tanh => 1.0 - v.tanh().powi(2),
            Self::Softplus => sigmoid(v),
        }
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// One node's map `R^{n t} -> R^m`.
#[derive(Debug, Clone, PartialEq)]
pub enum StageMap {
    Affine {
        a: DMatrix<f64>,
        b: DVector<f64>,
    },
    Componentwise {
        sigma: Nonlinearity,
        a: DMatrix<f64>,
        b: DVector<f64>,
        w: DMatrix<f64>,
        inner: DMatrix<f64>,
        shift: DVector<f64>,
    },
    Bilinear {
        a: DMatrix<f64>,
        b: DVector<f64>,
        w: DMatrix<f64>,
        p: DMatrix<f64>,
        p_shift: DVector<f64>,
        q: DMatrix<f64>,
        q_shift: DVector<f64>,
    },
}

impl StageMap {
    fn linear_part(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        match self {
            StageMap::Affine { a, b }
            | StageMap::Componentwise { a, b, .. }
            | StageMap::Bilinear { a, b, .. } => (a, b),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.linear_part().0.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.linear_part().0.ncols()
    }

    pub fn evaluate(&self, z: &DVector<f64>) -> DVector<f64> {
        let (a, b) = self.linear_part();
        let mut out = a * z + b;
        match self {
            StageMap::Affine { .. } => {}
            StageMap::Componentwise {
                sigma, w, inner, shift, ..
            } => {
                let u = (inner * z + shift).map(|v| sigma.value(v));
                out += w * u;
            }
            StageMap::Bilinear {
                w,
                p,
                p_shift,
                q,
                q_shift,
                ..
            } => {
                let u = (p * z + p_shift).map(f64::tanh);
                let v = (q * z + q_shift).map(f64::tanh);
                out += w * u.component_mul(&v);
            }
        }
        out
    }

    /// Full Jacobian `∂f/∂z`, of size `m × n t`.
    pub fn jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let (a, _) = self.linear_part();
        let mut jac = a.clone();
        match self {
            StageMap::Affine { .. } => {}
            StageMap::Componentwise {
                sigma, w, inner, shift, ..
            } => {
                let d = (inner * z + shift).map(|v| sigma.derivative(v));
                jac += w * DMatrix::from_diagonal(&d) * inner;
            }
            StageMap::Bilinear {
                w,
                p,
                p_shift,
                q,
                q_shift,
                ..
            } => {
                let pu = p * z + p_shift;
                let qv = q * z + q_shift;
                let u = pu.map(f64::tanh);
                let v = qv.map(f64::tanh);
                let du = pu.map(|s| 1.0 - s.tanh().powi(2)).component_mul(&v);
                let dv = qv.map(|s| 1.0 - s.tanh().powi(2)).component_mul(&u);
                jac += w * (DMatrix::from_diagonal(&du) * p + DMatrix::from_diagonal(&dv) * q);
            }
        }
        jac
    }

    /// Upper bound on `sup_z ||∂f/∂z||` from the parameter norms.
    pub fn derivative_bound(&self) -> f64 {
        let (a, _) = self.linear_part();
        let base = spectral_norm(a);
        match self {
            StageMap::Affine { .. } => base,
            StageMap::Componentwise { w, inner, .. } => base + spectral_norm(w) * spectral_norm(inner),
            StageMap::Bilinear { w, p, q, .. } => base + spectral_norm(w) * (spectral_norm(p) + spectral_norm(q)),
        }
    }

    /// True when the map is affine in the last `n` coordinates of `z`
    /// for every fixed history.
    pub fn affine_in_last(&self, n: usize) -> bool {
        let last_zero = |m: &DMatrix<f64>| {
            let c = m.ncols();
            (c - n..c).all(|j| m.column(j).iter().all(|v| *v == 0.0))
        };
        let w_zero = |w: &DMatrix<f64>| w.iter().all(|v| *v == 0.0);
        match self {
            StageMap::Affine { .. } => true,
            StageMap::Componentwise { w, inner, .. } => w_zero(w) || last_zero(inner),
            StageMap::Bilinear { w, p, q, .. } => w_zero(w) || (last_zero(p) && last_zero(q)),
        }
    }

    fn validate(&self, m: usize, cols: usize) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidOperator(format!("{what} has the wrong shape")));
        let (a, b) = self.linear_part();
        if a.nrows() != m || a.ncols() != cols {
            return bad("A");
        }
        if b.len() != m {
            return bad("b");
        }
        match self {
            StageMap::Affine { .. } => {}
            StageMap::Componentwise { w, inner, shift, .. } => {
                let r = inner.nrows();
                if w.nrows() != m || w.ncols() != r {
                    return bad("W");
                }
                if inner.ncols() != cols {
                    return bad("M");
                }
                if shift.len() != r {
                    return bad("c");
                }
            }
            StageMap::Bilinear {
                w,
                p,
                p_shift,
                q,
                q_shift,
                ..
            } => {
                let r = p.nrows();
                if w.nrows() != m || w.ncols() != r {
                    return bad("W");
                }
                if p.ncols() != cols || q.ncols() != cols || q.nrows() != r {
                    return bad("P/Q");
                }
                if p_shift.len() != r || q_shift.len() != r {
                    return bad("p/q");
                }
            }
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !finite(a) || b.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidOperator("non-finite coefficient".into()));
        }
        Ok(())
    }
}

/// JSON form of a stage map, matrices row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StageMapSpec {
    Affine {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
    },
    Smooth {
        name: String,
        params: SmoothParams,
    },
}

/// Parameters of the smooth-library maps. `M`/`c` are used by the
/// componentwise entries, `P`/`p`/`Q`/`q` by `bilinear`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SmoothParams {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub inner: Option<Vec<Vec<f64>>>,
    #[serde(rename = "c", default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<Vec<f64>>,
    #[serde(rename = "P", default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<Vec<f64>>>,
    #[serde(rename = "p", default, skip_serializing_if = "Option::is_none")]
    pub p_shift: Option<Vec<f64>>,
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(rename = "q", default, skip_serializing_if = "Option::is_none")]
    pub q_shift: Option<Vec<f64>>,
}

/// Serialized operator: maps keyed by node id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub n: usize,
    pub m: usize,
    pub c_f: f64,
    pub maps: BTreeMap<String, StageMapSpec>,
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidOperator(format!("matrix rows must have {ncols} entries")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn vec_to_list(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

impl StageMapSpec {
    /// Builds the map for a node whose history has `cols` coordinates.
    pub fn build(&self, cols: usize) -> Result<StageMap> {
        let width = |rows: &[Vec<f64>]| rows.first().map_or(0, |r| r.len());
        match self {
            StageMapSpec::Affine { a, b } => Ok(StageMap::Affine {
                a: matrix_from_rows(a, cols)?,
                b: DVector::from_column_slice(b),
            }),
            StageMapSpec::Smooth { name, params } => {
                let missing = |what: &str| Error::InvalidOperator(format!("smooth map `{name}` needs `{what}`"));
                let a = matrix_from_rows(&params.a, cols)?;
                let b = DVector::from_column_slice(&params.b);
                let w = matrix_from_rows(&params.w, width(&params.w))?;
                if name == "bilinear" {
                    let p = params.p.as_ref().ok_or_else(|| missing("P"))?;
                    let q = params.q.as_ref().ok_or_else(|| missing("Q"))?;
                    Ok(StageMap::Bilinear {
                        a,
                        b,
                        w,
                        p: matrix_from_rows(p, cols)?,
                        p_shift: DVector::from_column_slice(params.p_shift.as_ref().ok_or_else(|| missing("p"))?),
                        q: matrix_from_rows(q, cols)?,
                        q_shift: DVector::from_column_slice(params.q_shift.as_ref().ok_or_else(|| missing("q"))?),
                    })
                } else {
                    let sigma = Nonlinearity::parse(name)?;
                    let inner = params.inner.as_ref().ok_or_else(|| missing("M"))?;
                    Ok(StageMap::Componentwise {
                        sigma,
                        a,
                        b,
                        w,
                        inner: matrix_from_rows(inner, cols)?,
                        shift: DVector::from_column_slice(params.shift.as_ref().ok_or_else(|| missing("c"))?),
                    })
                }
            }
        }
    }

    pub fn from_map(map: &StageMap) -> Self {
        match map {
            StageMap::Affine { a, b } => StageMapSpec::Affine {
                a: matrix_to_rows(a),
                b: vec_to_list(b),
            },
            StageMap::Componentwise {
                sigma,
                a,
                b,
                w,
                inner,
                shift,
            } => StageMapSpec::Smooth {
                name: sigma.name().to_string(),
                params: SmoothParams {
                    a: matrix_to_rows(a),
                    b: vec_to_list(b),
                    w: matrix_to_rows(w),
                    inner: Some(matrix_to_rows(inner)),
                    shift: Some(vec_to_list(shift)),
                    ..Default::default()
                },
            },
            StageMap::Bilinear {
                a,
                b,
                w,
                p,
                p_shift,
                q,
                q_shift,
            } => StageMapSpec::Smooth {
                name: "bilinear".to_string(),
                params: SmoothParams {
                    a: matrix_to_rows(a),
                    b: vec_to_list(b),
                    w: matrix_to_rows(w),
                    p: Some(matrix_to_rows(p)),
                    p_shift: Some(vec_to_list(p_shift)),
                    q: Some(matrix_to_rows(q)),
                    q_shift: Some(vec_to_list(q_shift)),
                    ..Default::default()
                },
            },
        }
    }
}

/// A causal operator with one stage map per tree node.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalOperator {
    n: usize,
    m: usize,
    c_f: f64,
    maps: Vec<StageMap>,
}

impl CausalOperator {
    /// `maps[i]` is the map of node index `i`; a stage-`t` map (0-based)
    /// takes `n (t + 1)` inputs.
    pub fn new(tree: &ScenarioTree, n: usize, m: usize, c_f: f64, maps: Vec<StageMap>) -> Result<Self> {
        if maps.len() != tree.num_nodes() {
            return Err(Error::DimensionMismatch {
                context: "operator map count",
                expected: tree.num_nodes(),
                found: maps.len(),
            });
        }
        if !(c_f > 0.0) || !c_f.is_finite() {
            return Err(Error::InvalidOperator(format!("C_f must be positive, got {c_f}")));
        }
        for (node, map) in maps.iter().enumerate() {
            map.validate(m, n * (tree.node_stage(node) + 1))?;
        }
        Ok(Self { n, m, c_f, maps })
    }

    /// Same map builder at every node, given the node's 0-based stage.
    pub fn from_fn(
        tree: &ScenarioTree,
        n: usize,
        m: usize,
        c_f: f64,
        mut f: impl FnMut(usize, usize) -> StageMap,
    ) -> Result<Self> {
        let maps = (0..tree.num_nodes()).map(|node| f(tree.node_stage(node), node)).collect();
        Self::new(tree, n, m, c_f, maps)
    }

    pub fn from_spec(tree: &ScenarioTree, spec: &OperatorSpec) -> Result<Self> {
        let mut maps = Vec::with_capacity(tree.num_nodes());
        for node in 0..tree.num_nodes() {
            let id = tree.node_id(node);
            let entry = spec.maps.get(&id.to_string()).ok_or_else(|| {
                Error::schema(format!("/operator/maps/{id}"), format!("no stage map for node {id}"))
            })?;
            let cols = spec.n * (tree.node_stage(node) + 1);
            maps.push(
                entry
                    .build(cols)
                    .map_err(|e| Error::schema(format!("/operator/maps/{id}"), e.to_string()))?,
            );
        }
        for key in spec.maps.keys() {
            let known = key.parse::<u64>().ok().and_then(|id| tree.node_index(id)).is_some();
            if !known {
                return Err(Error::schema(
                    format!("/operator/maps/{key}"),
                    format!("node {key} does not exist in the tree"),
                ));
            }
        }
        Self::new(tree, spec.n, spec.m, spec.c_f, maps)
    }

    pub fn to_spec(&self, tree: &ScenarioTree) -> OperatorSpec {
        OperatorSpec {
            n: self.n,
            m: self.m,
            c_f: self.c_f,
            maps: self
                .maps
                .iter()
                .enumerate()
                .map(|(node, map)| (tree.node_id(node).to_string(), StageMapSpec::from_map(map)))
                .collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Declared bound on the stage Jacobians `||∂f_t/∂ξ_{1:t}||`.
    pub fn c_f(&self) -> f64 {
        self.c_f
    }

    /// `L = √T · C_f`, the Lipschitz constant of `F` in the stacked norm.
    pub fn lipschitz_constant(&self, tree: &ScenarioTree) -> f64 {
        (tree.stages() as f64).sqrt() * self.c_f
    }

    pub fn map(&self, node: usize) -> &StageMap {
        &self.maps[node]
    }

    /// Largest parameter-derived derivative bound over all nodes.
    pub fn analytic_bound(&self) -> f64 {
        self.maps.iter().map(StageMap::derivative_bound).fold(0.0, f64::max)
    }

    /// Whether every map is affine in the current-stage decision.
    pub fn affine_in_current(&self, node: usize) -> bool {
        self.maps[node].affine_in_last(self.n)
    }

    fn check_policy(&self, x: &AdaptedVector) -> Result<()> {
        if x.dim() != self.n {
            return Err(Error::DimensionMismatch {
                context: "operator input",
                expected: self.n,
                found: x.dim(),
            });
        }
        Ok(())
    }

    /// Stacked history `(x_1, ..., x_t)` seen by slot `k` at stage `t`.
    pub fn history(&self, tree: &ScenarioTree, x: &AdaptedVector, t: usize, k: usize) -> DVector<f64> {
        let mut z = DVector::zeros(self.n * (t + 1));
        for s in 0..=t {
            let src = x.slot(s, history_slot(tree, x.mode(), t, k, s));
            z.rows_mut(s * self.n, self.n).copy_from_slice(src);
        }
        z
    }

    /// `F(x)`, in the mode of `x`.
    pub fn evaluate(&self, tree: &ScenarioTree, x: &AdaptedVector) -> Result<AdaptedVector> {
        self.check_policy(x)?;
        Ok(AdaptedVector::from_fn(tree, x.mode(), self.m, |t, k| {
            let node = slot_node(tree, x.mode(), t, k);
            vec_to_list(&self.maps[node].evaluate(&self.history(tree, x, t, k)))
        }))
    }

    /// Stage-`t` value at one slot.
    pub fn evaluate_slot(&self, tree: &ScenarioTree, x: &AdaptedVector, t: usize, k: usize) -> DVector<f64> {
        let node = slot_node(tree, x.mode(), t, k);
        self.maps[node].evaluate(&self.history(tree, x, t, k))
    }

    /// Full stage Jacobian at one slot (`m × n(t+1)`).
    pub fn stage_jacobian(&self, tree: &ScenarioTree, x: &AdaptedVector, t: usize, k: usize) -> DMatrix<f64> {
        let node = slot_node(tree, x.mode(), t, k);
        self.maps[node].jacobian(&self.history(tree, x, t, k))
    }

    /// Block `A_{t,ℓ} = ∂f_t/∂ξ_ℓ` at slot `k` of stage `t` (0-based stages).
    pub fn jacobian_block(
        &self,
        tree: &ScenarioTree,
        x: &AdaptedVector,
        t: usize,
        l: usize,
        k: usize,
    ) -> Result<DMatrix<f64>> {
        tree.check_stage(t)?;
        if l > t {
            return Err(Error::NonCausalBlock { stage: t + 1, block: l + 1 });
        }
        self.check_policy(x)?;
        if k >= x.slots(t) {
            return Err(Error::InvalidArgument(format!("slot {k} out of range at stage {}", t + 1)));
        }
        let jac = self.stage_jacobian(tree, x, t, k);
        Ok(jac.columns(l * self.n, self.n).into_owned())
    }

    /// `F'(x) h`, node-wise `Σ_{ℓ<=t} A_{t,ℓ} h_ℓ`.
    pub fn apply_jacobian(&self, tree: &ScenarioTree, x: &AdaptedVector, h: &AdaptedVector) -> Result<AdaptedVector> {
        self.check_policy(x)?;
        self.check_policy(h)?;
        if x.mode() != h.mode() {
            return Err(Error::ModeMismatch("apply_jacobian: x and h differ in mode".into()));
        }
        Ok(AdaptedVector::from_fn(tree, x.mode(), self.m, |t, k| {
            let jac = self.stage_jacobian(tree, x, t, k);
            vec_to_list(&(jac * self.history(tree, h, t, k)))
        }))
    }

    /// Adjoint `[F'(x)]^* ψ` with respect to the probability pairing.
    ///
    /// In builtin mode the contribution of stage `t > ℓ` is averaged into
    /// the stage-`ℓ` ancestor, which realizes `E_ℓ[Σ_t A_{t,ℓ}^T ψ_t]`.
    /// In relaxed mode the sum is taken scenario by scenario.
    pub fn apply_adjoint(&self, tree: &ScenarioTree, x: &AdaptedVector, psi: &AdaptedVector) -> Result<AdaptedVector> {
        self.check_policy(x)?;
        if psi.dim() != self.m {
            return Err(Error::DimensionMismatch {
                context: "adjoint input",
                expected: self.m,
                found: psi.dim(),
            });
        }
        if x.mode() != psi.mode() {
            return Err(Error::ModeMismatch("apply_adjoint: x and ψ differ in mode".into()));
        }
        let mode = x.mode();
        let mut out = AdaptedVector::zeros(tree, mode, self.n);
        for t in 0..tree.stages() {
            for k in 0..x.slots(t) {
                let jac = self.stage_jacobian(tree, x, t, k);
                let back = jac.transpose() * DVector::from_column_slice(psi.slot(t, k));
                let p_here = slot_prob(tree, mode, t, k);
                for l in 0..=t {
                    let dst = history_slot(tree, mode, t, k, l);
                    let weight = match mode {
                        Mode::Builtin => p_here / slot_prob(tree, mode, l, dst),
                        Mode::Relaxed => 1.0,
                    };
                    for (o, v) in out.slot_mut(l, dst).iter_mut().zip(back.rows(l * self.n, self.n).iter()) {
                        *o += weight * v;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Largest stage-Jacobian spectral norm over random histories drawn
    /// from the box `[-radius, radius]`.
    pub fn sample_jacobian_norm(&self, tree: &ScenarioTree, samples: usize, radius: f64, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for node in 0..tree.num_nodes() {
            let cols = self.maps[node].in_dim();
            for _ in 0..samples {
                let z = DVector::from_fn(cols, |_, _| rng.gen_range(-radius..=radius));
                worst = worst.max(spectral_norm(&self.maps[node].jacobian(&z)));
            }
        }
        worst
    }

    /// Compares analytic directional derivatives with difference quotients.
    pub fn fd_check_jacobian(
        &self,
        tree: &ScenarioTree,
        x: &AdaptedVector,
        directions: &[AdaptedVector],
        steps: &[f64],
    ) -> Result<JacobianCheckReport> {
        if steps.is_empty() || steps.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument("finite-difference steps must be positive".into()));
        }
        let p = PNorm::default();
        let base = self.evaluate(tree, x)?;
        let mut forward = vec![0.0f64; steps.len()];
        let mut central = vec![0.0f64; steps.len()];
        let smallest = steps
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("nonempty");
        let mut pass = true;
        let mut worst_ratio = 0.0f64;
        for h in directions {
            let jh = self.apply_jacobian(tree, x, h)?;
            let h_norm = lp_norm(tree, h, p);
            for (i, &tau) in steps.iter().enumerate() {
                let plus = self.evaluate(tree, &(x + &(h * tau)))?;
                let minus = self.evaluate(tree, &(x - &(h * tau)))?;
                let fwd = &(&(&plus - &base) * (1.0 / tau)) - &jh;
                let cen = &(&(&plus - &minus) * (0.5 / tau)) - &jh;
                let fe = lp_norm(tree, &fwd, p);
                let ce = lp_norm(tree, &cen, p);
                forward[i] = forward[i].max(fe);
                central[i] = central[i].max(ce);
                if i == smallest {
                    let allowed = FD_TOL * (1.0 + h_norm);
                    worst_ratio = worst_ratio.max(ce / allowed);
                    if ce > allowed {
                        pass = false;
                    }
                }
            }
        }
        Ok(JacobianCheckReport {
            directions: directions.len(),
            steps: steps.to_vec(),
            forward_errors: forward,
            central_errors: central.clone(),
            error_at_smallest_step: central[smallest],
            worst_tolerance_ratio: worst_ratio,
            tolerance: FD_TOL,
            pass,
        })
    }
}

/// Largest `|<ψ, F'(x)h> - <A*ψ, h>|` over seeded random triples with
/// entries in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjointCheckReport {
    pub trials: usize,
    pub max_error_builtin: f64,
    pub max_error_relaxed: f64,
}

impl AdjointCheckReport {
    pub fn max_error(&self) -> f64 {
        self.max_error_builtin.max(self.max_error_relaxed)
    }
}

impl CausalOperator {
    /// Checks the pairing identity between [`Self::apply_jacobian`] and
    /// [`Self::apply_adjoint`] in both layouts.
    pub fn check_adjoint(&self, tree: &ScenarioTree, trials: usize, seed: u64) -> Result<AdjointCheckReport> {
        use crate::adapted::inner_product;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = [0.0f64; 2];
        for (slot, mode) in [Mode::Builtin, Mode::Relaxed].into_iter().enumerate() {
            for _ in 0..trials {
                let x = AdaptedVector::random(tree, mode, self.n, 1.0, &mut rng);
                let h = AdaptedVector::random(tree, mode, self.n, 1.0, &mut rng);
                let psi = AdaptedVector::random(tree, mode, self.m, 1.0, &mut rng);
                let lhs = inner_product(tree, &psi, &self.apply_jacobian(tree, &x, &h)?)?;
                let rhs = inner_product(tree, &self.apply_adjoint(tree, &x, &psi)?, &h)?;
                worst[slot] = worst[slot].max((lhs - rhs).abs());
            }
        }
        Ok(AdjointCheckReport {
            trials,
            max_error_builtin: worst[0],
            max_error_relaxed: worst[1],
        })
    }
}

/// Tolerance factor of the derivative check: error `<= FD_TOL (1 + ||h||)`.
pub const FD_TOL: f64 = 1e-6;

/// Outcome of [`CausalOperator::fd_check_jacobian`].
///
/// `forward_errors[i]` is the worst `(1/τ)||F(x+τh) - F(x) - τF'(x)h||`
/// and `central_errors[i]` the worst symmetric-quotient error at
/// `steps[i]`. The verdict uses the symmetric quotient at the smallest step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianCheckReport {
    pub directions: usize,
    pub steps: Vec<f64>,
    pub forward_errors: Vec<f64>,
    pub central_errors: Vec<f64>,
    pub error_at_smallest_step: f64,
    /// Largest `error / (tol (1 + ||h||))` at the smallest step.
    pub worst_tolerance_ratio: f64,
    pub tolerance: f64,
    pub pass: bool,
}
