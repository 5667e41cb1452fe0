//! Small dense convex quadratic programs.
//!
//! [`solve_bounded`] minimizes `½ xᵀHx + fᵀx` subject to `lo ≤ x ≤ hi` and
//! `Ex = e` with `H` positive semidefinite, by a primal active-set method
//! over the bound constraints. Subspace steps use eigendecompositions so a
//! singular `H` is handled: zero-curvature descent directions become rays,
//! and a ray that meets no bound reports [`QpFailure::Unbounded`].
//!
//! Everything here is desk scale (tens of variables).

use nalgebra::{DMatrix, DVector, SymmetricEigen};

#[derive(Debug, Clone, PartialEq)]
pub enum QpFailure {
    Unbounded,
    IterationLimit(DVector<f64>),
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub iterations: usize,
}

/// Linear equality block `E x = e`.
pub struct Equalities<'a> {
    pub matrix: &'a DMatrix<f64>,
    pub rhs: &'a DVector<f64>,
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum Fixed {
    No,
    Lower,
    Upper,
    Pinned,
}

/// Active-set solve from a feasible start `x0`.
pub fn solve_bounded(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    lo: &[f64],
    hi: &[f64],
    eq: Option<Equalities<'_>>,
    x0: DVector<f64>,
) -> Result<QpSolution, QpFailure> {
    let n = f.len();
    assert_eq!(h.nrows(), n);
    assert_eq!(lo.len(), n);
    assert_eq!(hi.len(), n);
    let mut x = x0;
    let mut fixed = vec![Fixed::No; n];
    for i in 0..n {
        x[i] = x[i].clamp(lo[i], hi[i]);
        fixed[i] = if lo[i] == hi[i] {
            Fixed::Pinned
        } else if x[i] == lo[i] {
            Fixed::Lower
        } else if x[i] == hi[i] {
            Fixed::Upper
        } else {
            Fixed::No
        };
    }
    let scale = 1.0 + h.amax() + f.amax();
    let max_iter = 40 * (n + 5);

    for iter in 0..max_iter {
        let free: Vec<usize> = (0..n).filter(|&i| fixed[i] == Fixed::No).collect();
        let grad = h * &x + f;
        let grad_scale = 1.0 + grad.amax();

        let (step, is_ray) = subspace_step(h, &grad, &free, eq.as_ref().map(|e| e.matrix), grad_scale);
        let step_norm = step.iter().fold(0.0f64, |m, v| m.max(v.abs()));

        if !is_ray && step_norm <= 1e-14 * (1.0 + x.amax()) {
            // stationary on the current face; check bound multipliers
            let reduced = reduced_gradient(&grad, &free, eq.as_ref().map(|e| e.matrix));
            let tol = 1e-11 * scale.max(grad_scale);
            let mut worst: Option<(usize, f64)> = None;
            for i in 0..n {
                let violation = match fixed[i] {
                    Fixed::Lower => -reduced[i],
                    Fixed::Upper => reduced[i],
                    _ => continue,
                };
                if violation > tol && worst.map_or(true, |(_, w)| violation > w) {
                    worst = Some((i, violation));
                }
            }
            match worst {
                None => {
                    return Ok(QpSolution {
                        x,
                        iterations: iter,
                    })
                }
                Some((i, _)) => {
                    fixed[i] = Fixed::No;
                    continue;
                }
            }
        }

        let mut alpha = if is_ray { f64::INFINITY } else { 1.0 };
        let mut block: Option<(usize, Fixed)> = None;
        for &i in &free {
            let p = step[i];
            if p < 0.0 && lo[i] > f64::NEG_INFINITY {
                let a = (lo[i] - x[i]) / p;
                if a < alpha {
                    alpha = a.max(0.0);
                    block = Some((i, Fixed::Lower));
                }
            } else if p > 0.0 && hi[i] < f64::INFINITY {
                let a = (hi[i] - x[i]) / p;
                if a < alpha {
                    alpha = a.max(0.0);
                    block = Some((i, Fixed::Upper));
                }
            }
        }
        if !alpha.is_finite() {
            return Err(QpFailure::Unbounded);
        }
        for &i in &free {
            x[i] += alpha * step[i];
        }
        if let Some((i, side)) = block {
            x[i] = if side == Fixed::Lower { lo[i] } else { hi[i] };
            fixed[i] = side;
        }
    }
    Err(QpFailure::IterationLimit(x))
}

// Minimizer step of the quadratic restricted to the free variables and the
// null space of the equality rows. Returns (step, is_ray).
fn subspace_step(
    h: &DMatrix<f64>,
    grad: &DVector<f64>,
    free: &[usize],
    eq: Option<&DMatrix<f64>>,
    grad_scale: f64,
) -> (DVector<f64>, bool) {
    let n = grad.len();
    let mut step = DVector::zeros(n);
    if free.is_empty() {
        return (step, false);
    }
    let k = free.len();
    let hff = DMatrix::from_fn(k, k, |a, b| h[(free[a], free[b])]);
    let gf = DVector::from_fn(k, |a, _| grad[free[a]]);
    let z = match eq {
        Some(e) if e.nrows() > 0 => {
            let ef = DMatrix::from_fn(e.nrows(), k, |r, a| e[(r, free[a])]);
            null_space(&ef)
        }
        _ => DMatrix::identity(k, k),
    };
    if z.ncols() == 0 {
        return (step, false);
    }
    let reduced_h = z.transpose() * &hff * &z;
    let b = z.transpose() * &gf;
    let eig = SymmetricEigen::new(reduced_h);
    let lambda_tol = 1e-12 * (1.0 + eig.eigenvalues.amax());
    let mut y = DVector::zeros(z.ncols());
    let mut null_part = DVector::zeros(z.ncols());
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let q = eig.eigenvectors.column(j);
        let coef = q.dot(&b);
        if lam > lambda_tol {
            y -= q * (coef / lam);
        } else {
            null_part += q * coef;
        }
    }
    let is_ray = null_part.norm() > 1e-10 * grad_scale;
    if is_ray {
        y = -null_part;
    }
    let pf = z * y;
    for (a, &i) in free.iter().enumerate() {
        step[i] = pf[a];
    }
    (step, is_ray)
}

// grad + Eᵀν with ν chosen to cancel the free components (least squares).
fn reduced_gradient(grad: &DVector<f64>, free: &[usize], eq: Option<&DMatrix<f64>>) -> DVector<f64> {
    match eq {
        Some(e) if e.nrows() > 0 => {
            let k = free.len();
            let eft = DMatrix::from_fn(k, e.nrows(), |a, r| e[(r, free[a])]);
            let gf = DVector::from_fn(k, |a, _| -grad[free[a]]);
            let nu = if k == 0 {
                DVector::zeros(e.nrows())
            } else {
                lstsq(&eft, &gf)
            };
            grad + e.transpose() * nu
        }
        _ => grad.clone(),
    }
}

/// Minimum-norm least-squares solution of `A x ≈ b`.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return DVector::zeros(a.ncols());
    }
    let svd = a.clone().svd(true, true);
    let eps = 1e-12 * svd.singular_values.amax().max(1e-300);
    svd.solve(b, eps).unwrap_or_else(|_| DVector::zeros(a.ncols()))
}

/// Orthonormal basis (as columns) of the null space of `a`.
pub fn null_space(a: &DMatrix<f64>) -> DMatrix<f64> {
    let k = a.ncols();
    if a.nrows() == 0 {
        return DMatrix::identity(k, k);
    }
    let gram = a.transpose() * a;
    let eig = SymmetricEigen::new(gram);
    let tol = 1e-11 * (1.0 + eig.eigenvalues.amax());
    let cols: Vec<DVector<f64>> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, &l)| l <= tol)
        .map(|(j, _)| eig.eigenvectors.column(j).into_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(k, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Orthonormal basis of the span of the columns of `a`.
pub fn range_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    let d = a.nrows();
    if a.ncols() == 0 {
        return DMatrix::zeros(d, 0);
    }
    let gram = a * a.transpose();
    let eig = SymmetricEigen::new(gram);
    let tol = 1e-11 * (1.0 + eig.eigenvalues.amax());
    let cols: Vec<DVector<f64>> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, &l)| l > tol)
        .map(|(j, _)| eig.eigenvectors.column(j).into_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(d, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.amax()
}

/// Euclidean projection of `eta` onto `{z : Gz ≤ h, Ez = e}` via the dual
/// bound-constrained QP. `None` when the polyhedron is empty.
pub fn project_polyhedron(
    eta: &DVector<f64>,
    g: &DMatrix<f64>,
    h: &DVector<f64>,
    e: &DMatrix<f64>,
    e_rhs: &DVector<f64>,
) -> Option<DVector<f64>> {
    let mut z = eta.clone();
    for _ in 0..3 {
        let next = dual_projection(&z, g, h, e, e_rhs)?;
        let violation = polyhedron_violation(&next, g, h, e, e_rhs);
        z = next;
        if violation <= 1e-12 * (1.0 + z.amax()) {
            break;
        }
    }
    Some(z)
}

fn dual_projection(
    eta: &DVector<f64>,
    g: &DMatrix<f64>,
    h: &DVector<f64>,
    e: &DMatrix<f64>,
    e_rhs: &DVector<f64>,
) -> Option<DVector<f64>> {
    let d = eta.len();
    let mi = g.nrows();
    let me = e.nrows();
    if mi + me == 0 {
        return Some(eta.clone());
    }
    let mut m = DMatrix::zeros(mi + me, d);
    m.view_mut((0, 0), (mi, d)).copy_from(g);
    m.view_mut((mi, 0), (me, d)).copy_from(e);
    let mut rhs = DVector::zeros(mi + me);
    rhs.rows_mut(0, mi).copy_from(h);
    rhs.rows_mut(mi, me).copy_from(e_rhs);
    let hess = &m * m.transpose();
    let lin = -(&m * eta - rhs);
    let mut lo = vec![0.0; mi + me];
    lo[mi..].iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
    let hi = vec![f64::INFINITY; mi + me];
    match solve_bounded(&hess, &lin, &lo, &hi, None, DVector::zeros(mi + me)) {
        Ok(sol) => Some(eta - m.transpose() * sol.x),
        Err(QpFailure::Unbounded) => None,
        Err(QpFailure::IterationLimit(w)) => Some(eta - m.transpose() * w),
    }
}

/// Largest constraint violation of `z` for `{Gz ≤ h, Ez = e}`.
pub fn polyhedron_violation(
    z: &DVector<f64>,
    g: &DMatrix<f64>,
    h: &DVector<f64>,
    e: &DMatrix<f64>,
    e_rhs: &DVector<f64>,
) -> f64 {
    let ineq = (g * z - h).iter().fold(0.0f64, |m, &v| m.max(v));
    let eqv = if e.nrows() > 0 {
        (e * z - e_rhs).amax()
    } else {
        0.0
    };
    ineq.max(eqv)
}

/// Projection of `v` onto `{N μ + F ν : μ ≥ 0}` (columns are generators).
pub fn project_onto_cone(v: &DVector<f64>, nonneg: &DMatrix<f64>, free: &DMatrix<f64>) -> DVector<f64> {
    let d = v.len();
    let k = nonneg.ncols() + free.ncols();
    if k == 0 {
        return DVector::zeros(d);
    }
    let mut b = DMatrix::zeros(d, k);
    b.view_mut((0, 0), (d, nonneg.ncols())).copy_from(nonneg);
    b.view_mut((0, nonneg.ncols()), (d, free.ncols())).copy_from(free);
    let hess = b.transpose() * &b;
    let lin = -(b.transpose() * v);
    let mut lo = vec![0.0; k];
    lo[nonneg.ncols()..].iter_mut().for_each(|x| *x = f64::NEG_INFINITY);
    let hi = vec![f64::INFINITY; k];
    let w = match solve_bounded(&hess, &lin, &lo, &hi, None, DVector::zeros(k)) {
        Ok(sol) => sol.x,
        Err(QpFailure::IterationLimit(w)) => w,
        // bounded below by 0, cannot happen
        Err(QpFailure::Unbounded) => DVector::zeros(k),
    };
    b * w
}

#[cfg(test)]
mod tests {
    use super::*;

    // brute-force KKT enumeration for projection onto {Gz <= h}
    fn enumerate_projection(eta: &DVector<f64>, g: &DMatrix<f64>, h: &DVector<f64>) -> DVector<f64> {
        let m = g.nrows();
        let mut best: Option<(f64, DVector<f64>)> = None;
        for mask in 0u32..(1 << m) {
            let rows: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            let ga = DMatrix::from_fn(rows.len(), eta.len(), |r, c| g[(rows[r], c)]);
            let ha = DVector::from_fn(rows.len(), |r, _| h[rows[r]]);
            // z = eta - Gaᵀ μ with Ga z = ha
            let gram = &ga * ga.transpose();
            let rhs = &ga * eta - &ha;
            let mu = lstsq(&gram, &rhs);
            let z = eta - ga.transpose() * &mu;
            if (&ga * &z - &ha).amax() > 1e-9 {
                continue;
            }
            if (g * &z - h).iter().any(|&v| v > 1e-9) {
                continue;
            }
            let dist = (&z - eta).norm();
            if best.as_ref().map_or(true, |(b, _)| dist < *b - 1e-12) {
                best = Some((dist, z));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn projection_matches_enumeration() {
        let g = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, -1.0, 0.0, 0.0, -1.0, 1.0, -2.0]);
        let h = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.5]);
        let e = DMatrix::zeros(0, 2);
        let er = DVector::zeros(0);
        for eta in [[3.0, 3.0], [-1.0, -1.0], [0.2, 0.2], [2.0, -3.0], [-2.0, 4.0]] {
            let eta = DVector::from_vec(eta.to_vec());
            let z = project_polyhedron(&eta, &g, &h, &e, &er).unwrap();
            let oracle = enumerate_projection(&eta, &g, &h);
            assert!((&z - &oracle).norm() < 1e-10, "{z} vs {oracle}");
        }
    }

    #[test]
    fn empty_polyhedron_is_detected() {
        let g = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let h = DVector::from_vec(vec![-1.0, -1.0]); // z <= -1 and z >= 1
        let e = DMatrix::zeros(0, 1);
        let er = DVector::zeros(0);
        assert!(project_polyhedron(&DVector::from_vec(vec![0.0]), &g, &h, &e, &er).is_none());
    }

    #[test]
    fn equality_constrained_projection() {
        let g = DMatrix::zeros(0, 3);
        let h = DVector::zeros(0);
        let e = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let er = DVector::from_vec(vec![3.0]);
        let z = project_polyhedron(&DVector::zeros(3), &g, &h, &e, &er).unwrap();
        assert!((z - DVector::from_vec(vec![1.0, 1.0, 1.0])).norm() < 1e-12);
    }

    #[test]
    fn cone_projection_nonnegative_orthant() {
        let v = DVector::from_vec(vec![1.0, -2.0]);
        let z = project_onto_cone(&v, &DMatrix::identity(2, 2), &DMatrix::zeros(2, 0));
        assert!((z - DVector::from_vec(vec![1.0, 0.0])).norm() < 1e-14);
    }

    #[test]
    fn bounded_least_squares_with_equality() {
        // min (x0 - 2)^2 + (x1 - 2)^2 s.t. x0 + x1 = 1, 0 <= x <= 0.8
        let h = DMatrix::identity(2, 2) * 2.0;
        let f = DVector::from_vec(vec![-4.0, -4.0]);
        let e = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let er = DVector::from_vec(vec![1.0]);
        let sol = solve_bounded(
            &h,
            &f,
            &[0.0, 0.0],
            &[0.8, 0.8],
            Some(Equalities {
                matrix: &e,
                rhs: &er,
            }),
            DVector::from_vec(vec![0.8, 0.2]),
        )
        .unwrap();
        assert!((sol.x[0] - 0.5).abs() < 1e-12);
        assert!((sol.x[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn singular_hessian_ray_hits_bound() {
        // min -x0 with H = 0, x0 <= 2
        let h = DMatrix::zeros(1, 1);
        let f = DVector::from_vec(vec![-1.0]);
        let sol = solve_bounded(&h, &f, &[f64::NEG_INFINITY], &[2.0], None, DVector::zeros(1)).unwrap();
        assert_eq!(sol.x[0], 2.0);
        let unb = solve_bounded(&h, &f, &[f64::NEG_INFINITY], &[f64::INFINITY], None, DVector::zeros(1));
        assert_eq!(unb.unwrap_err(), QpFailure::Unbounded);
    }
}
