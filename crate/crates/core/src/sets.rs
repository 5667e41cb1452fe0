//! Closed convex sets attached to tree nodes.
//!
//! Each [`ConvexSet`] supports Euclidean projection, distance, and normal
//! cone queries. Boxes, balls, singletons, orthants and subspaces use closed
//! forms; polyhedra go through the dual active-set QP in [`crate::qp`].
//! A [`DecomposableFamily`] assigns one set to every node, which makes the
//! family `F_t`-measurable at each stage by construction.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp;
use crate::tree::ScenarioTree;

/// Membership tolerance for normal cones and set containment.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

/// Distance to a bound below which the bound counts as active.
pub const ACTIVE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    /// `z_i >= 0`
    Nonneg,
    /// `z_i <= 0`
    Nonpos,
    /// unconstrained
    Free,
    /// `z_i = 0`
    Zero,
}

impl Sign {
    fn polar(self) -> Self {
        match self {
            Sign::Nonneg => Sign::Nonpos,
            Sign::Nonpos => Sign::Nonneg,
            Sign::Free => Sign::Zero,
            Sign::Zero => Sign::Free,
        }
    }
}

/// A closed convex subset of `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ConvexSet {
    /// Componentwise bounds; infinite bounds serialize as `null`.
    Box {
        #[serde(with = "bounds::lower")]
        lower: Vec<f64>,
        #[serde(with = "bounds::upper")]
        upper: Vec<f64>,
    },
    /// `{z : G z <= h}`.
    Polyhedron {
        #[serde(rename = "G")]
        g: Vec<Vec<f64>>,
        h: Vec<f64>,
        dim: usize,
    },
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    Singleton {
        point: Vec<f64>,
    },
    Orthant {
        signs: Vec<Sign>,
    },
    /// Span of the listed vectors.
    Subspace {
        basis: Vec<Vec<f64>>,
        dim: usize,
    },
}

mod bounds {
    // null <-> infinite bound
    macro_rules! bound_mod {
        ($name:ident, $inf:expr) => {
            pub mod $name {
                use serde::{Deserialize, Deserializer, Serializer};

                pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
                    s.collect_seq(v.iter().map(|x| if x.is_finite() { Some(*x) } else { None }))
                }

                pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
                    let raw: Vec<Option<f64>> = Vec::deserialize(d)?;
                    Ok(raw.into_iter().map(|x| x.unwrap_or($inf)).collect())
                }
            }
        };
    }
    bound_mod!(lower, f64::NEG_INFINITY);
    bound_mod!(upper, f64::INFINITY);
}

/// Generators of a finitely generated cone: `{N μ + F ν : μ >= 0}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeGenerators {
    pub nonneg: Vec<DVector<f64>>,
    pub free: Vec<DVector<f64>>,
}

impl ConeGenerators {
    fn empty() -> Self {
        Self {
            nonneg: Vec::new(),
            free: Vec::new(),
        }
    }

    fn matrices(&self, d: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let to_mat = |v: &[DVector<f64>]| {
            if v.is_empty() {
                DMatrix::zeros(d, 0)
            } else {
                DMatrix::from_columns(v)
            }
        };
        (to_mat(&self.nonneg), to_mat(&self.free))
    }

    /// Euclidean projection onto the generated cone.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        let (n, f) = self.matrices(v.len());
        qp::project_onto_cone(v, &n, &f)
    }
}

/// Linear description `{G z <= h, E z = e}`.
#[derive(Debug, Clone)]
pub struct LinearDescription {
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub e: DMatrix<f64>,
    pub e_rhs: DVector<f64>,
}

impl ConvexSet {
    pub fn unconstrained(d: usize) -> Self {
        ConvexSet::Box {
            lower: vec![f64::NEG_INFINITY; d],
            upper: vec![f64::INFINITY; d],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexSet::Box { lower, .. } => lower.len(),
            ConvexSet::Polyhedron { dim, .. } => *dim,
            ConvexSet::Ball { center, .. } => center.len(),
            ConvexSet::Singleton { point } => point.len(),
            ConvexSet::Orthant { signs } => signs.len(),
            ConvexSet::Subspace { dim, .. } => *dim,
        }
    }

    /// Checks descriptor consistency; polyhedra get a feasibility solve.
    pub fn validate(&self) -> Result<()> {
        match self {
            ConvexSet::Box { lower, upper } => {
                if lower.len() != upper.len() {
                    return Err(Error::InvalidSet("box bounds differ in length".into()));
                }
                for (l, u) in lower.iter().zip(upper) {
                    if l.is_nan() || u.is_nan() || l > u || *l == f64::INFINITY || *u == f64::NEG_INFINITY {
                        return Err(Error::InvalidSet(format!("box bound [{l}, {u}] is inconsistent")));
                    }
                }
            }
            ConvexSet::Polyhedron { g, h, dim } => {
                if g.len() != h.len() || g.iter().any(|row| row.len() != *dim) {
                    return Err(Error::InvalidSet("polyhedron rows do not match G/h shape".into()));
                }
                let desc = self.linear_description().expect("polyhedron is linear");
                if qp::project_polyhedron(&DVector::zeros(*dim), &desc.g, &desc.h, &desc.e, &desc.e_rhs)
                    .is_none()
                {
                    return Err(Error::EmptySet);
                }
            }
            ConvexSet::Ball { radius, center } => {
                if !(*radius >= 0.0) || !radius.is_finite() || center.iter().any(|c| !c.is_finite()) {
                    return Err(Error::InvalidSet(format!("ball radius {radius} is invalid")));
                }
            }
            ConvexSet::Singleton { point } => {
                if point.iter().any(|c| !c.is_finite()) {
                    return Err(Error::InvalidSet("singleton point is not finite".into()));
                }
            }
            ConvexSet::Orthant { .. } => {}
            ConvexSet::Subspace { basis, dim } => {
                if basis.iter().any(|b| b.len() != *dim) {
                    return Err(Error::InvalidSet("subspace basis vectors have the wrong length".into()));
                }
            }
        }
        Ok(())
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "convex set",
                expected: self.dim(),
                found: z.len(),
            });
        }
        Ok(())
    }

    /// Euclidean projection onto the set.
    pub fn project(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        Ok(match self {
            ConvexSet::Box { lower, upper } => z
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(&v, (&l, &u))| v.clamp(l, u))
                .collect(),
            ConvexSet::Ball { center, radius } => {
                let diff: Vec<f64> = z.iter().zip(center).map(|(a, c)| a - c).collect();
                let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm <= *radius {
                    z.to_vec()
                } else {
                    center
                        .iter()
                        .zip(&diff)
                        .map(|(c, d)| c + d * radius / norm)
                        .collect()
                }
            }
            ConvexSet::Singleton { point } => point.clone(),
            ConvexSet::Orthant { signs } => z
                .iter()
                .zip(signs)
                .map(|(&v, s)| match s {
                    Sign::Nonneg => v.max(0.0),
                    Sign::Nonpos => v.min(0.0),
                    Sign::Free => v,
                    Sign::Zero => 0.0,
                })
                .collect(),
            ConvexSet::Subspace { .. } => {
                let q = self.subspace_basis();
                let zv = DVector::from_column_slice(z);
                (&q * (q.transpose() * zv)).iter().copied().collect()
            }
            ConvexSet::Polyhedron { .. } => {
                let desc = self.linear_description().expect("polyhedron is linear");
                let eta = DVector::from_column_slice(z);
                qp::project_polyhedron(&eta, &desc.g, &desc.h, &desc.e, &desc.e_rhs)
                    .ok_or(Error::EmptySet)?
                    .iter()
                    .copied()
                    .collect()
            }
        })
    }

    /// `d(z, S) = ||z - P_S(z)||`.
    pub fn distance(&self, z: &[f64]) -> Result<f64> {
        let p = self.project(z)?;
        Ok(z.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    }

    pub fn contains(&self, z: &[f64]) -> Result<bool> {
        Ok(self.distance(z)? <= MEMBERSHIP_TOL)
    }

    // Orthonormal basis of a subspace descriptor.
    fn subspace_basis(&self) -> DMatrix<f64> {
        match self {
            ConvexSet::Subspace { basis, dim } => {
                if basis.is_empty() {
                    return DMatrix::zeros(*dim, 0);
                }
                let cols: Vec<DVector<f64>> = basis.iter().map(|b| DVector::from_column_slice(b)).collect();
                qp::range_basis(&DMatrix::from_columns(&cols))
            }
            _ => unreachable!("subspace_basis on a non-subspace"),
        }
    }

    /// `{G z <= h, E z = e}` form, when the set is polyhedral.
    pub fn linear_description(&self) -> Option<LinearDescription> {
        let d = self.dim();
        let mut g_rows: Vec<Vec<f64>> = Vec::new();
        let mut h = Vec::new();
        let mut e_rows: Vec<Vec<f64>> = Vec::new();
        let mut e_rhs = Vec::new();
        let unit = |i: usize, s: f64| {
            let mut r = vec![0.0; d];
            r[i] = s;
            r
        };
        match self {
            ConvexSet::Box { lower, upper } => {
                for i in 0..d {
                    if lower[i] == upper[i] {
                        e_rows.push(unit(i, 1.0));
                        e_rhs.push(lower[i]);
                        continue;
                    }
                    if lower[i].is_finite() {
                        g_rows.push(unit(i, -1.0));
                        h.push(-lower[i]);
                    }
                    if upper[i].is_finite() {
                        g_rows.push(unit(i, 1.0));
                        h.push(upper[i]);
                    }
                }
            }
            ConvexSet::Polyhedron { g, h: hh, .. } => {
                g_rows = g.clone();
                h = hh.clone();
            }
            ConvexSet::Singleton { point } => {
                for (i, &p) in point.iter().enumerate() {
                    e_rows.push(unit(i, 1.0));
                    e_rhs.push(p);
                }
            }
            ConvexSet::Orthant { signs } => {
                for (i, s) in signs.iter().enumerate() {
                    match s {
                        Sign::Nonneg => {
                            g_rows.push(unit(i, -1.0));
                            h.push(0.0);
                        }
                        Sign::Nonpos => {
                            g_rows.push(unit(i, 1.0));
                            h.push(0.0);
                        }
                        Sign::Free => {}
                        Sign::Zero => {
                            e_rows.push(unit(i, 1.0));
                            e_rhs.push(0.0);
                        }
                    }
                }
            }
            ConvexSet::Subspace { .. } => {
                let q = self.subspace_basis();
                let comp = qp::null_space(&q.transpose());
                for j in 0..comp.ncols() {
                    e_rows.push(comp.column(j).iter().copied().collect());
                    e_rhs.push(0.0);
                }
            }
            ConvexSet::Ball { radius, center } => {
                if *radius == 0.0 {
                    for (i, &p) in center.iter().enumerate() {
                        e_rows.push(unit(i, 1.0));
                        e_rhs.push(p);
                    }
                } else {
                    return None;
                }
            }
        }
        let to_mat = |rows: &[Vec<f64>]| {
            DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c])
        };
        Some(LinearDescription {
            g: to_mat(&g_rows),
            h: DVector::from_vec(h),
            e: to_mat(&e_rows),
            e_rhs: DVector::from_vec(e_rhs),
        })
    }

    /// Generators of the normal cone `N_S(x)` at a point of the set.
    pub fn normal_cone(&self, x: &[f64]) -> Result<ConeGenerators> {
        self.check_dim(x)?;
        let dist = self.distance(x)?;
        if dist > MEMBERSHIP_TOL {
            return Err(Error::NotInSet { distance: dist });
        }
        let d = self.dim();
        let unit = |i: usize, s: f64| {
            let mut v = DVector::zeros(d);
            v[i] = s;
            v
        };
        let mut cone = ConeGenerators::empty();
        match self {
            ConvexSet::Ball { center, radius } => {
                if *radius == 0.0 {
                    cone.free = (0..d).map(|i| unit(i, 1.0)).collect();
                } else {
                    let diff = DVector::from_iterator(d, x.iter().zip(center).map(|(a, c)| a - c));
                    if diff.norm() >= radius - ACTIVE_TOL {
                        cone.nonneg.push(diff / *radius);
                    }
                }
            }
            ConvexSet::Subspace { .. } => {
                let q = self.subspace_basis();
                let comp = qp::null_space(&q.transpose());
                cone.free = (0..comp.ncols()).map(|j| comp.column(j).into_owned()).collect();
            }
            _ => {
                let desc = self.linear_description().expect("polyhedral kinds");
                let xv = DVector::from_column_slice(x);
                let slack = &desc.h - &desc.g * &xv;
                for r in 0..desc.g.nrows() {
                    let row_norm = desc.g.row(r).norm().max(1.0);
                    if slack[r] <= ACTIVE_TOL * row_norm {
                        cone.nonneg.push(desc.g.row(r).transpose());
                    }
                }
                cone.free = (0..desc.e.nrows()).map(|r| desc.e.row(r).transpose()).collect();
            }
        }
        Ok(cone)
    }

    /// `||v - P_{N_S(x)}(v)||`; zero iff `v ∈ N_S(x)`.
    pub fn normal_cone_residual(&self, x: &[f64], v: &[f64]) -> Result<f64> {
        self.check_dim(v)?;
        let dist = self.distance(x)?;
        if dist > MEMBERSHIP_TOL {
            return Err(Error::NotInSet { distance: dist });
        }
        let d = self.dim();
        let res = match self {
            ConvexSet::Box { lower, upper } => (0..d)
                .map(|i| {
                    let at_lo = x[i] - lower[i] <= ACTIVE_TOL;
                    let at_hi = upper[i] - x[i] <= ACTIVE_TOL;
                    let c = match (at_lo, at_hi) {
                        (true, true) => 0.0,
                        (true, false) => v[i].max(0.0),
                        (false, true) => v[i].min(0.0),
                        (false, false) => v[i],
                    };
                    c * c
                })
                .sum::<f64>()
                .sqrt(),
            ConvexSet::Orthant { signs } => (0..d)
                .map(|i| {
                    let at_zero = x[i].abs() <= ACTIVE_TOL;
                    let c = match (signs[i], at_zero) {
                        (Sign::Zero, _) => 0.0,
                        (Sign::Free, _) => v[i],
                        (Sign::Nonneg, true) => v[i].max(0.0),
                        (Sign::Nonpos, true) => v[i].min(0.0),
                        (_, false) => v[i],
                    };
                    c * c
                })
                .sum::<f64>()
                .sqrt(),
            ConvexSet::Singleton { .. } => 0.0,
            ConvexSet::Ball { .. } | ConvexSet::Subspace { .. } | ConvexSet::Polyhedron { .. } => {
                let cone = self.normal_cone(x)?;
                let vv = DVector::from_column_slice(v);
                (&vv - cone.project(&vv)).norm()
            }
        };
        Ok(res)
    }

    /// Whether the descriptor is a closed convex cone.
    pub fn is_cone(&self) -> bool {
        match self {
            ConvexSet::Orthant { .. } | ConvexSet::Subspace { .. } => true,
            ConvexSet::Polyhedron { h, .. } => h.iter().all(|v| v.abs() <= 1e-12),
            ConvexSet::Singleton { point } => point.iter().all(|v| *v == 0.0),
            ConvexSet::Ball { center, radius } => *radius == 0.0 && center.iter().all(|v| *v == 0.0),
            ConvexSet::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .all(|(l, u)| (*l == 0.0 || *l == f64::NEG_INFINITY) && (*u == 0.0 || *u == f64::INFINITY)),
        }
    }

    /// Polar cone `{y : <y, k> <= 0 for all k in C}`.
    pub fn polar(&self) -> Result<ConvexSet> {
        if !self.is_cone() {
            return Err(Error::NotACone(format!("{self:?}")));
        }
        let d = self.dim();
        Ok(match self {
            ConvexSet::Orthant { signs } => ConvexSet::Orthant {
                signs: signs.iter().map(|s| s.polar()).collect(),
            },
            ConvexSet::Box { lower, upper } => ConvexSet::Orthant {
                signs: lower
                    .iter()
                    .zip(upper)
                    .map(|(l, u)| match (l.is_finite(), u.is_finite()) {
                        (true, true) => Sign::Zero,
                        (true, false) => Sign::Nonneg,
                        (false, true) => Sign::Nonpos,
                        (false, false) => Sign::Free,
                    }
                    .polar())
                    .collect(),
            },
            ConvexSet::Singleton { .. } | ConvexSet::Ball { .. } => ConvexSet::Orthant {
                signs: vec![Sign::Free; d],
            },
            ConvexSet::Subspace { .. } => {
                let q = self.subspace_basis();
                let comp = qp::null_space(&q.transpose());
                ConvexSet::Subspace {
                    basis: (0..comp.ncols()).map(|j| comp.column(j).iter().copied().collect()).collect(),
                    dim: d,
                }
            }
            ConvexSet::Polyhedron { g, .. } => polyhedral_cone_polar(g, d),
        })
    }
}

// Polar of {z : G z <= 0}: {y : <y, r> <= 0 for extreme rays r, <y, l> = 0
// on the lineality space}. Rays are enumerated from tight row subsets.
fn polyhedral_cone_polar(g: &[Vec<f64>], d: usize) -> ConvexSet {
    let gm = DMatrix::from_fn(g.len(), d, |r, c| g[r][c]);
    let lineality = qp::null_space(&gm);
    let rank = d - lineality.ncols();
    let mut rays: Vec<DVector<f64>> = Vec::new();
    if rank > 0 {
        let m = g.len();
        for subset in subsets(m, rank - 1) {
            let rows = subset.len() + lineality.ncols();
            let mut a = DMatrix::zeros(rows, d);
            for (r, &i) in subset.iter().enumerate() {
                a.set_row(r, &gm.row(i));
            }
            for j in 0..lineality.ncols() {
                a.set_row(subset.len() + j, &lineality.column(j).transpose());
            }
            let ns = qp::null_space(&a);
            if ns.ncols() != 1 {
                continue;
            }
            let dir = ns.column(0).into_owned();
            for cand in [dir.clone(), -dir] {
                let ok = (&gm * &cand).iter().all(|&v| v <= 1e-10);
                if ok && !rays.iter().any(|r| (r - &cand).norm() < 1e-9) {
                    rays.push(cand);
                }
            }
        }
    }
    let mut rows: Vec<Vec<f64>> = rays.iter().map(|r| r.iter().copied().collect()).collect();
    for j in 0..lineality.ncols() {
        let l: Vec<f64> = lineality.column(j).iter().copied().collect();
        rows.push(l.iter().map(|v| -v).collect());
        rows.push(l);
    }
    if rows.is_empty() {
        return ConvexSet::Orthant {
            signs: vec![Sign::Free; d],
        };
    }
    let h = vec![0.0; rows.len()];
    ConvexSet::Polyhedron { g: rows, h, dim: d }
}

fn subsets(m: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(start: usize, m: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..m {
            cur.push(i);
            rec(i + 1, m, k, cur, out);
            cur.pop();
        }
    }
    rec(0, m, k, &mut cur, &mut out);
    out
}

/// One set per tree node, all of the same dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposableFamily {
    dim: usize,
    sets: Vec<ConvexSet>,
}

impl DecomposableFamily {
    /// `sets[i]` belongs to node index `i`.
    pub fn new(tree: &ScenarioTree, dim: usize, sets: Vec<ConvexSet>) -> Result<Self> {
        if sets.len() != tree.num_nodes() {
            return Err(Error::DimensionMismatch {
                context: "set family size",
                expected: tree.num_nodes(),
                found: sets.len(),
            });
        }
        for s in &sets {
            if s.dim() != dim {
                return Err(Error::DimensionMismatch {
                    context: "set family member",
                    expected: dim,
                    found: s.dim(),
                });
            }
            s.validate()?;
        }
        Ok(Self { dim, sets })
    }

    pub fn uniform(tree: &ScenarioTree, set: ConvexSet) -> Result<Self> {
        let dim = set.dim();
        Self::new(tree, dim, vec![set; tree.num_nodes()])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn set(&self, node: usize) -> &ConvexSet {
        &self.sets[node]
    }

    pub fn sets(&self) -> &[ConvexSet] {
        &self.sets
    }
}

/// Outcome of [`verify_decomposable_polar`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarReport {
    pub samples: usize,
    /// Samples the node-wise test placed in the polar.
    pub accepted: usize,
    pub rejected: usize,
    /// Samples where the node-wise verdict and the pairing verdict differ.
    pub disagreements: usize,
    /// Largest normalized positive pairing `<y,k>/(|y||k|)` over accepted
    /// samples, or largest failure of a rejection witness.
    pub max_violation: f64,
}

/// Sampled check that `y ∈ K°` iff `y(ω) ∈ K(ω)°` node-wise, where `K` is
/// the decomposable cone of adapted vectors with `k(ω) ∈ family(ω)`.
///
/// Accepted samples are paired against sampled elements of `K`; rejected
/// samples get an explicit witness `k ∈ K` with `<y, k> > 0`.
pub fn verify_decomposable_polar(
    family: &DecomposableFamily,
    tree: &ScenarioTree,
    samples: usize,
    seed: u64,
) -> Result<PolarReport> {
    use crate::adapted::{inner_product, AdaptedVector, Mode};

    let polars: Vec<ConvexSet> = family.sets.iter().map(|c| c.polar()).collect::<Result<_>>()?;
    let d = family.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let mut report = PolarReport {
        samples,
        accepted: 0,
        rejected: 0,
        disagreements: 0,
        max_violation: 0.0,
    };

    for i in 0..samples {
        // half the samples are drawn inside the node-wise polar
        let inside = i % 2 == 0;
        let y = AdaptedVector::from_fn(tree, Mode::Builtin, d, |t, k| {
            let node = tree.stage_nodes(t)[k];
            let raw = normal(&mut rng);
            if inside {
                polars[node].project(&raw).expect("dimension checked")
            } else {
                raw
            }
        });
        let mut nodewise_in = true;
        for t in 0..tree.stages() {
            for k in 0..y.slots(t) {
                let node = tree.stage_nodes(t)[k];
                if polars[node].distance(y.slot(t, k))? > MEMBERSHIP_TOL {
                    nodewise_in = false;
                }
            }
        }
        let y_norm = inner_product(tree, &y, &y)?.sqrt().max(1e-300);

        if nodewise_in {
            report.accepted += 1;
            let mut worst = 0.0f64;
            for _ in 0..16 {
                let raw = AdaptedVector::from_fn(tree, Mode::Builtin, d, |_, _| normal(&mut rng));
                let kv = AdaptedVector::from_fn(tree, Mode::Builtin, d, |t, k| {
                    let node = tree.stage_nodes(t)[k];
                    family.sets[node].project(raw.slot(t, k)).expect("dimension checked")
                });
                // Normalized by the raw sample rather than by `k`: a narrow
                // cone projects many samples to round-off sized vectors whose
                // direction is noise. Since `||P_K z|| <= ||z||` this never
                // hides a genuine positive pairing.
                let z_norm = inner_product(tree, &raw, &raw)?.sqrt();
                if z_norm > 0.0 {
                    worst = worst.max(inner_product(tree, &y, &kv)? / (y_norm * z_norm));
                }
            }
            if worst > 1e-12 {
                report.disagreements += 1;
            }
            report.max_violation = report.max_violation.max(worst);
        } else {
            report.rejected += 1;
            // k(ω) = P_{K(ω)} y(ω) pairs positively wherever y(ω) leaves the polar
            let kv = AdaptedVector::from_fn(tree, Mode::Builtin, d, |t, k| {
                let node = tree.stage_nodes(t)[k];
                family.sets[node].project(y.slot(t, k)).expect("dimension checked")
            });
            let pairing = inner_product(tree, &y, &kv)?;
            if pairing <= 0.0 {
                report.disagreements += 1;
                report.max_violation = report.max_violation.max(-pairing / y_norm);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(l: f64, u: f64) -> ConvexSet {
        ConvexSet::Box {
            lower: vec![l],
            upper: vec![u],
        }
    }

    #[test]
    fn projection_examples() {
        assert_eq!(boxed(0.0, 1.0).project(&[1.7]).unwrap(), vec![1.0]);
        assert_eq!(boxed(0.0, 1.0).project(&[0.3]).unwrap(), vec![0.3]);
        let ball = ConvexSet::Ball {
            center: vec![0.0, 0.0],
            radius: 1.0,
        };
        let p = ball.project(&[3.0, 4.0]).unwrap();
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn distance_examples() {
        assert!((boxed(0.0, 1.0).distance(&[1.7]).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(boxed(0.0, 1.0).distance(&[0.5]).unwrap(), 0.0);
        let s = ConvexSet::Singleton { point: vec![1.0, 1.0] };
        assert!((s.distance(&[4.0, 5.0]).unwrap() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        assert!(boxed(0.0, 1.0).project(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn normal_cone_residual_examples() {
        let b = boxed(0.0, 1.0);
        assert_eq!(b.normal_cone_residual(&[1.0], &[2.5]).unwrap(), 0.0);
        assert!((b.normal_cone_residual(&[0.5], &[-3.0]).unwrap() - 3.0).abs() < 1e-15);
        assert!((b.normal_cone_residual(&[1.0], &[-1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            b.normal_cone_residual(&[2.0], &[1.0]),
            Err(Error::NotInSet { .. })
        ));
    }

    #[test]
    fn polyhedron_normal_cone_at_vertex() {
        // triangle x >= 0, y >= 0, x + y <= 1; vertex (1, 0)
        let p = ConvexSet::Polyhedron {
            g: vec![vec![-1.0, 0.0], vec![0.0, -1.0], vec![1.0, 1.0]],
            h: vec![0.0, 0.0, 1.0],
            dim: 2,
        };
        assert!(p.normal_cone_residual(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-12);
        assert!(p.normal_cone_residual(&[1.0, 0.0], &[0.5, -2.0]).unwrap() < 1e-12);
        let r = p.normal_cone_residual(&[1.0, 0.0], &[-1.0, 0.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-12, "{r}");
    }

    #[test]
    fn polar_examples() {
        let pos = ConvexSet::Orthant {
            signs: vec![Sign::Nonneg; 3],
        };
        assert_eq!(
            pos.polar().unwrap(),
            ConvexSet::Orthant {
                signs: vec![Sign::Nonpos; 3]
            }
        );
        let zero = ConvexSet::Singleton { point: vec![0.0, 0.0] };
        assert_eq!(
            zero.polar().unwrap(),
            ConvexSet::Orthant {
                signs: vec![Sign::Free; 2]
            }
        );
        let line = ConvexSet::Subspace {
            basis: vec![vec![1.0, 1.0]],
            dim: 2,
        };
        let perp = line.polar().unwrap();
        assert!(perp.distance(&[1.0, -1.0]).unwrap() < 1e-12);
        assert!((perp.distance(&[1.0, 1.0]).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert!(boxed(0.0, 1.0).polar().is_err());
    }

    #[test]
    fn polyhedral_cone_double_polar() {
        let cone = ConvexSet::Polyhedron {
            g: vec![vec![-1.0, 0.0, 0.0], vec![1.0, -1.0, 0.0]],
            h: vec![0.0, 0.0],
            dim: 3,
        };
        let back = cone.polar().unwrap().polar().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a = cone.distance(&z).unwrap();
            let b = back.distance(&z).unwrap();
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn box_serializes_infinite_bounds_as_null() {
        let s = ConvexSet::Box {
            lower: vec![f64::NEG_INFINITY, 0.0],
            upper: vec![1.0, f64::INFINITY],
        };
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"kind":"box","lower":[null,0.0],"upper":[1.0,null]}"#);
        let back: ConvexSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn empty_polyhedron_rejected_at_validation() {
        let p = ConvexSet::Polyhedron {
            g: vec![vec![1.0], vec![-1.0]],
            h: vec![-1.0, -1.0],
            dim: 1,
        };
        assert!(matches!(p.validate(), Err(Error::EmptySet)));
    }

    #[test]
    fn single_node_polar_check() {
        let tree = ScenarioTree::uniform(&[]).unwrap();
        let fam = DecomposableFamily::uniform(
            &tree,
            ConvexSet::Orthant {
                signs: vec![Sign::Nonneg],
            },
        )
        .unwrap();
        let rep = verify_decomposable_polar(&fam, &tree, 200, 1).unwrap();
        assert_eq!(rep.disagreements, 0);
        assert!(rep.accepted > 0 && rep.rejected > 0);
    }
}
