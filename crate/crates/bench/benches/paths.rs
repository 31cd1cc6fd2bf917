use ampere::ito::{
    ito_jacobian, semimartingale_decomposition_check, simulate_paths, transport_process, ClarkOconeDrift,
    DecompositionOptions, DriftSource, IntegralScheme, TimeGrid,
};
use ampere_bench::endpoint_fixture;
use criterion::{black_box, criterion_group, criterion_main, Criterion};

fn paths(c: &mut Criterion) {
    let mut group = c.benchmark_group("paths_512x1000");
    group.sample_size(10);
    let grid = TimeGrid::uniform(512).unwrap();
    group.bench_function("simulate", |b| b.iter(|| simulate_paths(1000, black_box(&grid), 1).unwrap()));

    let (e, f) = endpoint_fixture(512, 1000);
    let process = transport_process(&f, &e).unwrap();
    let drift = ClarkOconeDrift::closed_form(&f, e.grid()).unwrap();
    group.bench_function("transport_process", |b| b.iter(|| transport_process(&f, black_box(&e)).unwrap()));
    group.bench_function("ito_jacobian", |b| {
        b.iter(|| ito_jacobian(&f, black_box(&process), &drift, IntegralScheme::default()).unwrap())
    });
    group.bench_function("decomposition_regression", |b| {
        b.iter(|| {
            semimartingale_decomposition_check(black_box(&process), &f, DriftSource::Regression, &DecompositionOptions::default())
                .unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, paths);
criterion_main!(benches);
