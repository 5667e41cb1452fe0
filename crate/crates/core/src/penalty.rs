//! The distance penalty `Φ(x) = Σ_t dist(F_t(x), Y_t)` and its Clarke
//! subgradient.
//!
//! Each stage term is the `L_p` norm over nodes of the Euclidean distance
//! `d(F_t(x)(ω), Y_t(ω))`. At `p = 2` and an infeasible stage, the term is
//! differentiable in `y_t` with gradient `r_t / ||r_t||`, where
//! `r_t = F_t(x) - P_{Y_t}(F_t(x))`; composing with the adjoint of `F'(x)`
//! gives a subgradient of `Φ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapted::{lp_norm, slot_node, stage_norm, AdaptedVector, PNorm};
use crate::causal::CausalOperator;
use crate::error::{Error, Result};
use crate::sets::DecomposableFamily;
use crate::tree::ScenarioTree;

/// Value of `Φ` with its stage-wise ingredients.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyEvaluation {
    pub value: f64,
    /// `||d(F_t(x), Y_t)||_p` for each stage.
    pub stage_distances: Vec<f64>,
    /// `F(x)`, in the mode of `x`.
    pub image: AdaptedVector,
    /// Projection residuals `F_t(x) - P_{Y_t}(F_t(x))`.
    pub residuals: AdaptedVector,
}

impl PenaltyEvaluation {
    /// Stage distances below `tol` count as feasible.
    pub fn is_feasible(&self, tol: f64) -> bool {
        self.value <= tol
    }
}

fn check_family(f: &CausalOperator, y_fam: &DecomposableFamily) -> Result<()> {
    if y_fam.dim() != f.m() {
        return Err(Error::DimensionMismatch {
            context: "constraint family Y",
            expected: f.m(),
            found: y_fam.dim(),
        });
    }
    Ok(())
}

/// Node-wise residuals `v - P_S(v)` of an adapted vector against a family.
pub fn family_residuals(
    tree: &ScenarioTree,
    fam: &DecomposableFamily,
    v: &AdaptedVector,
) -> Result<AdaptedVector> {
    let mut out = AdaptedVector::zeros(tree, v.mode(), v.dim());
    for t in 0..tree.stages() {
        for k in 0..v.slots(t) {
            let node = slot_node(tree, v.mode(), t, k);
            let proj = fam.set(node).project(v.slot(t, k))?;
            for ((o, a), b) in out.slot_mut(t, k).iter_mut().zip(v.slot(t, k)).zip(&proj) {
                *o = a - b;
            }
        }
    }
    Ok(out)
}

/// `Σ_t ||d(v_t, S_t)||_p`, the aggregated distance of `v` to a family.
pub fn family_distance(tree: &ScenarioTree, fam: &DecomposableFamily, v: &AdaptedVector, p: PNorm) -> Result<f64> {
    Ok(stage_family_distances(tree, fam, v, p)?.iter().sum())
}

/// Per-stage `||d(v_t, S_t)||_p`.
pub fn stage_family_distances(
    tree: &ScenarioTree,
    fam: &DecomposableFamily,
    v: &AdaptedVector,
    p: PNorm,
) -> Result<Vec<f64>> {
    let r = family_residuals(tree, fam, v)?;
    Ok((0..tree.stages()).map(|t| stage_norm(tree, &r, t, p)).collect())
}

/// Evaluates `Φ(x)`.
pub fn phi(
    tree: &ScenarioTree,
    f: &CausalOperator,
    x: &AdaptedVector,
    y_fam: &DecomposableFamily,
    p: PNorm,
) -> Result<PenaltyEvaluation> {
    check_family(f, y_fam)?;
    let image = f.evaluate(tree, x)?;
    let residuals = family_residuals(tree, y_fam, &image)?;
    let stage_distances: Vec<f64> = (0..tree.stages()).map(|t| stage_norm(tree, &residuals, t, p)).collect();
    Ok(PenaltyEvaluation {
        value: stage_distances.iter().sum(),
        stage_distances,
        image,
        residuals,
    })
}

/// Dual element `ψ ∈ ∂dist(F(x), Y)` used by [`phi_subgradient`].
///
/// Infeasible stages get `r_t / ||r_t||_2`. Feasible stages take the
/// matching stage of `feasible_choice` when given, and zero otherwise.
pub fn distance_dual(
    tree: &ScenarioTree,
    eval: &PenaltyEvaluation,
    feasible_choice: Option<&AdaptedVector>,
) -> Result<AdaptedVector> {
    let r = &eval.residuals;
    if let Some(g) = feasible_choice {
        if !g.same_shape(r) {
            return Err(Error::DimensionMismatch {
                context: "feasible-stage dual element",
                expected: r.dim(),
                found: g.dim(),
            });
        }
    }
    let mut psi = AdaptedVector::zeros(tree, r.mode(), r.dim());
    for t in 0..tree.stages() {
        let d = eval.stage_distances[t];
        if d > 0.0 {
            for (o, v) in psi.stage_mut(t).iter_mut().zip(r.stage(t)) {
                *o = v / d;
            }
        } else if let Some(g) = feasible_choice {
            psi.stage_mut(t).copy_from_slice(g.stage(t));
        }
    }
    Ok(psi)
}

/// An element of the Clarke subdifferential `∂Φ(x) = [F'(x)]^*(∂dist(F(x), Y))`.
///
/// Exact formulas are only available for `p = 2`.
pub fn phi_subgradient(
    tree: &ScenarioTree,
    f: &CausalOperator,
    x: &AdaptedVector,
    y_fam: &DecomposableFamily,
    p: PNorm,
    feasible_choice: Option<&AdaptedVector>,
) -> Result<AdaptedVector> {
    if !p.is_two() {
        return Err(Error::UnsupportedNorm(p.value()));
    }
    let eval = phi(tree, f, x, y_fam, p)?;
    let psi = distance_dual(tree, &eval, feasible_choice)?;
    f.apply_adjoint(tree, x, &psi)
}

/// How far `ψ` is from `N_Y(F(x)) ∩ B` stage by stage, at a feasible `x`.
///
/// Returns the larger of the worst node-wise normal-cone residual and the
/// worst excess of `||ψ_t||_2` over 1. Zero means `[F'(x)]^*ψ ∈ ∂Φ(x)`.
pub fn dual_membership_residual(
    tree: &ScenarioTree,
    f: &CausalOperator,
    x: &AdaptedVector,
    y_fam: &DecomposableFamily,
    psi: &AdaptedVector,
) -> Result<f64> {
    check_family(f, y_fam)?;
    let image = f.evaluate(tree, x)?;
    if !psi.same_shape(&image) {
        return Err(Error::ModeMismatch("dual element does not match F(x)".into()));
    }
    let mut worst: f64 = 0.0;
    for t in 0..tree.stages() {
        for k in 0..image.slots(t) {
            let node = slot_node(tree, image.mode(), t, k);
            worst = worst.max(y_fam.set(node).normal_cone_residual(image.slot(t, k), psi.slot(t, k))?);
        }
        let norm = stage_norm(tree, psi, t, PNorm::default());
        worst = worst.max(norm - 1.0);
    }
    Ok(worst)
}

/// Sampled Clarke directional derivative
/// `sup (Φ(z + τh) - Φ(z)) / τ` over `τ` in `steps` and `z = x` or
/// `z = x + τ ξ` with random unit `ξ`.
#[allow(clippy::too_many_arguments)]
pub fn clarke_dirderiv_fd(
    tree: &ScenarioTree,
    f: &CausalOperator,
    x: &AdaptedVector,
    y_fam: &DecomposableFamily,
    h: &AdaptedVector,
    z_samples: usize,
    steps: &[f64],
    seed: u64,
) -> Result<f64> {
    if !x.same_shape(h) {
        return Err(Error::ModeMismatch("direction does not match x".into()));
    }
    if steps.is_empty() || steps.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidArgument("steps must be positive".into()));
    }
    let p = PNorm::default();
    let value = |z: &AdaptedVector| phi(tree, f, z, y_fam, p).map(|e| e.value);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::NEG_INFINITY;
    for &tau in steps {
        for sample in 0..=z_samples {
            let z = if sample == 0 {
                x.clone()
            } else {
                let xi = AdaptedVector::from_fn(tree, x.mode(), x.dim(), |_, _| {
                    (0..x.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect()
                });
                let norm = lp_norm(tree, &xi, p).max(1e-300);
                x + &(&xi * (tau / norm))
            };
            let q = (value(&(&z + &(h * tau)))? - value(&z)?) / tau;
            best = best.max(q);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapted::{inner_product, Mode};
    use crate::causal::StageMap;
    use crate::sets::ConvexSet;
    use nalgebra::{DMatrix, DVector};

    fn identity_op(tree: &ScenarioTree, n: usize) -> CausalOperator {
        CausalOperator::from_fn(tree, n, n, 1.0, |t, _| {
            let mut a = DMatrix::zeros(n, n * (t + 1));
            a.columns_mut(n * t, n).fill_with_identity();
            StageMap::Affine { a, b: DVector::zeros(n) }
        })
        .unwrap()
    }

    #[test]
    fn singleton_zero_gives_euclidean_norm() {
        let tree = ScenarioTree::uniform(&[]).unwrap();
        let f = identity_op(&tree, 2);
        let y = DecomposableFamily::uniform(&tree, ConvexSet::Singleton { point: vec![0.0, 0.0] }).unwrap();
        let x = AdaptedVector::from_fn(&tree, Mode::Builtin, 2, |_, _| vec![3.0, 4.0]);
        let e = phi(&tree, &f, &x, &y, PNorm::default()).unwrap();
        assert_eq!(e.value, 5.0);
        let g = phi_subgradient(&tree, &f, &x, &y, PNorm::default(), None).unwrap();
        assert!((g.stage(0)[0] - 0.6).abs() < 1e-15 && (g.stage(0)[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn box_distance_and_feasible_zero() {
        let tree = ScenarioTree::uniform(&[]).unwrap();
        let f = identity_op(&tree, 1);
        let y = DecomposableFamily::uniform(
            &tree,
            ConvexSet::Box {
                lower: vec![0.0],
                upper: vec![1.0],
            },
        )
        .unwrap();
        let x = AdaptedVector::from_fn(&tree, Mode::Builtin, 1, |_, _| vec![1.7]);
        assert!((phi(&tree, &f, &x, &y, PNorm::default()).unwrap().value - 0.7).abs() < 1e-15);
        let inside = AdaptedVector::from_fn(&tree, Mode::Builtin, 1, |_, _| vec![0.4]);
        let e = phi(&tree, &f, &inside, &y, PNorm::default()).unwrap();
        assert_eq!(e.value, 0.0);
        let g = phi_subgradient(&tree, &f, &inside, &y, PNorm::default(), None).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn p_other_than_two_has_no_exact_subgradient() {
        let tree = ScenarioTree::uniform(&[]).unwrap();
        let f = identity_op(&tree, 1);
        let y = DecomposableFamily::uniform(&tree, ConvexSet::Singleton { point: vec![0.0] }).unwrap();
        let x = AdaptedVector::zeros(&tree, Mode::Builtin, 1);
        assert!(matches!(
            phi_subgradient(&tree, &f, &x, &y, PNorm::new(1.0).unwrap(), None),
            Err(Error::UnsupportedNorm(_))
        ));
    }

    #[test]
    fn clarke_matches_gradient_when_smooth() {
        let tree = ScenarioTree::uniform(&[2]).unwrap();
        let f = identity_op(&tree, 1);
        let y = DecomposableFamily::uniform(
            &tree,
            ConvexSet::Box {
                lower: vec![-1.0],
                upper: vec![1.0],
            },
        )
        .unwrap();
        let x = AdaptedVector::from_fn(&tree, Mode::Builtin, 1, |t, k| vec![2.0 + t as f64 + k as f64]);
        let h = AdaptedVector::from_fn(&tree, Mode::Builtin, 1, |t, k| vec![0.3 - t as f64 * k as f64]);
        let g = phi_subgradient(&tree, &f, &x, &y, PNorm::default(), None).unwrap();
        let pairing = inner_product(&tree, &g, &h).unwrap();
        let fd = clarke_dirderiv_fd(&tree, &f, &x, &y, &h, 8, &[1e-6, 1e-7], 5).unwrap();
        assert!((fd - pairing).abs() < 1e-5, "{fd} vs {pairing}");
        let zero = AdaptedVector::zeros(&tree, Mode::Builtin, 1);
        assert_eq!(clarke_dirderiv_fd(&tree, &f, &x, &y, &zero, 4, &[1e-6], 5).unwrap(), 0.0);
    }

    #[test]
    fn membership_of_unit_normal() {
        let tree = ScenarioTree::uniform(&[]).unwrap();
        let f = identity_op(&tree, 1);
        let y = DecomposableFamily::uniform(
            &tree,
            ConvexSet::Box {
                lower: vec![0.0],
                upper: vec![1.0],
            },
        )
        .unwrap();
        let x = AdaptedVector::from_fn(&tree, Mode::Builtin, 1, |_, _| vec![1.0]);
        let good = AdaptedVector::from_fn(&tree, Mode::Builtin, 1, |_, _| vec![0.5]);
        let too_long = AdaptedVector::from_fn(&tree, Mode::Builtin, 1, |_, _| vec![1.5]);
        let wrong_sign = AdaptedVector::from_fn(&tree, Mode::Builtin, 1, |_, _| vec![-0.5]);
        assert_eq!(dual_membership_residual(&tree, &f, &x, &y, &good).unwrap(), 0.0);
        assert!((dual_membership_residual(&tree, &f, &x, &y, &too_long).unwrap() - 0.5).abs() < 1e-15);
        assert!((dual_membership_residual(&tree, &f, &x, &y, &wrong_sign).unwrap() - 0.5).abs() < 1e-15);
    }
}
