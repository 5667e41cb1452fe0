use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use recourse_core::adapted::{conditional_expectation_builtin, nonanticipativity_project};
use recourse_core::generate::{OperatorFamily, SetFamily};
use recourse_core::optimality::recover_multipliers;
use recourse_core::recourse::restore_builtin;
use recourse_core::{generate, AdaptedVector, CertificateMode, ConvexSet, GeneratorSpec, KktTolerances, Mode};

fn spec(branching: Vec<usize>, operator: OperatorFamily, sets: SetFamily) -> GeneratorSpec {
    GeneratorSpec {
        seed: 1,
        stages: branching.len() + 1,
        branching,
        n: 3,
        m: 2,
        operator,
        sets,
        ..GeneratorSpec::default()
    }
}

fn operator_kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("operator");
    for branching in [vec![3, 3], vec![4, 4, 4]] {
        let g = generate(&spec(branching.clone(), OperatorFamily::Smooth, SetFamily::Box)).unwrap();
        let tree = g.problem.tree();
        let op = g.problem.operator();
        let label = format!("{} nodes", tree.num_nodes());
        let x = AdaptedVector::random_batch(tree, Mode::Builtin, 3, 1.0, 1, 7).remove(0);
        let psi = AdaptedVector::random_batch(tree, Mode::Builtin, 2, 1.0, 1, 8).remove(0);
        group.bench_with_input(BenchmarkId::new("evaluate", &label), &x, |b, x| {
            b.iter(|| op.evaluate(tree, black_box(x)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("adjoint", &label), &psi, |b, psi| {
            b.iter(|| op.apply_adjoint(tree, &x, black_box(psi)).unwrap())
        });
    }
    group.finish();
}

fn projection_kernels(c: &mut Criterion) {
    let g = generate(&spec(vec![4, 4, 4], OperatorFamily::Affine, SetFamily::Box)).unwrap();
    let tree = g.problem.tree();
    let v = AdaptedVector::random_batch(tree, Mode::Relaxed, 3, 1.0, 1, 3).remove(0);
    c.bench_function("nonanticipativity_project/85 nodes", |b| {
        b.iter(|| nonanticipativity_project(tree, black_box(&v)).unwrap())
    });
    c.bench_function("conditional_expectation_builtin/85 nodes", |b| {
        b.iter(|| conditional_expectation_builtin(tree, black_box(&v)).unwrap())
    });

    let poly = ConvexSet::Polyhedron {
        g: vec![
            vec![1.0, 0.5, -0.2],
            vec![-0.3, 1.0, 0.4],
            vec![0.2, -0.7, 1.0],
            vec![-1.0, -1.0, -1.0],
        ],
        h: vec![1.0, 0.5, 0.8, 1.2],
        dim: 3,
    };
    c.bench_function("polyhedron_projection/4 rows", |b| {
        b.iter(|| poly.project(black_box(&[2.0, -1.5, 3.0])).unwrap())
    });
}

fn restoration_and_recovery(c: &mut Criterion) {
    let g = generate(&spec(vec![3, 3], OperatorFamily::Smooth, SetFamily::Polyhedron)).unwrap();
    let inst = &g.problem.constraints;
    let u = &g.reference + &AdaptedVector::random_batch(&inst.tree, Mode::Builtin, 3, 2.0, 1, 5).remove(0);
    c.bench_function("restore_builtin/13 nodes", |b| b.iter(|| restore_builtin(inst, black_box(&u)).unwrap()));

    let small = generate(&GeneratorSpec {
        n: 1,
        m: 1,
        ..spec(vec![2, 1], OperatorFamily::Smooth, SetFamily::Box)
    })
    .unwrap();
    let tol = KktTolerances::default();
    c.bench_function("recover_multipliers/builtin 5 nodes", |b| {
        b.iter(|| recover_multipliers(&small.problem, black_box(&small.reference), CertificateMode::Builtin, &tol).unwrap())
    });
}

criterion_group!(benches, operator_kernels, projection_kernels, restoration_and_recovery);
criterion_main!(benches);
