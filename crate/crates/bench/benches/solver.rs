use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sparsecl::estimate::default_lambda_min;
use sparsecl::model::evaluate_scores;
use sparsecl::nalgebra::DVector;
use sparsecl::sim::{fig1_covariance, fig2_distances, gravity_synthetic_data};
use sparsecl::solver::{solution_path, solve_weights};
use sparsecl::stats::{empirical_score_covariance, population_score_covariance};
use sparsecl::ModelSpec;

fn population_paths(c: &mut Criterion) {
    let mut group = c.benchmark_group("population_path");
    group.sample_size(10);
    for m in [20, 100, 400] {
        let spec = ModelSpec::location(fig1_covariance(0.5, m)).unwrap();
        let j = population_score_covariance(&spec, 0.0).unwrap();
        group.bench_with_input(BenchmarkId::new("fig1", m), &j, |b, j| b.iter(|| solution_path(black_box(j), 0.0).unwrap()));
    }
    for d in [10, 20, 30] {
        let spec = ModelSpec::pairwise(fig2_distances(d)).unwrap();
        let j = population_score_covariance(&spec, 0.6).unwrap();
        group.bench_with_input(BenchmarkId::new("fig2", spec.m()), &j, |b, j| b.iter(|| solution_path(black_box(j), 0.0).unwrap()));
    }
    group.finish();
}

fn single_lambda(c: &mut Criterion) {
    let spec = ModelSpec::pairwise(fig2_distances(20)).unwrap();
    let j = population_score_covariance(&spec, 0.6).unwrap();
    let lambda = 0.1 * j.max_diagonal();
    c.bench_function("solve_weights/fig2_m190", |b| b.iter(|| solve_weights(black_box(&j), lambda).unwrap()));
}

fn isserlis_assembly(c: &mut Criterion) {
    let mut group = c.benchmark_group("population_covariance");
    group.sample_size(10);
    for d in [10, 20, 30] {
        let spec = ModelSpec::pairwise(fig2_distances(d)).unwrap();
        group.bench_with_input(BenchmarkId::new("pairwise", spec.m()), &spec, |b, spec| {
            b.iter(|| population_score_covariance(black_box(spec), 0.6).unwrap())
        });
    }
    group.finish();
}

fn empirical(c: &mut Criterion) {
    let mut group = c.benchmark_group("empirical");
    group.sample_size(10);
    for d in [10, 20] {
        let (spec, data) = gravity_synthetic_data(d, 60, 0.05, 1).unwrap();
        let theta = DVector::from_element(1, 0.05);
        group.bench_with_input(BenchmarkId::new("scores_and_covariance", spec.m()), &(), |b, _| {
            b.iter(|| {
                let batch = evaluate_scores(&spec, &theta, &data, false).unwrap();
                empirical_score_covariance(&batch).unwrap()
            })
        });
        let batch = evaluate_scores(&spec, &theta, &data, false).unwrap();
        let j = empirical_score_covariance(&batch).unwrap();
        let lambda_min = default_lambda_min(&j);
        group.bench_with_input(BenchmarkId::new("rank_deficient_path", spec.m()), &j, |b, j| {
            b.iter(|| solution_path(black_box(j), lambda_min).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, population_paths, single_lambda, isserlis_assembly, empirical);
criterion_main!(benches);
