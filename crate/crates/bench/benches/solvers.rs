use ampere::linear::{lambda_k, polar_decompose, PerturbationOperator};
use ampere::monge_ampere::ma_residual;
use ampere::transport::{polar_factorize_discrete, solve_1d, solve_gaussian, solve_grid_entropic, Cdf1dOptions, EntropicOptions, GridSpec};
use ampere::DensitySpec;
use ampere_bench::{covariance_2d, line, scale_target};
use criterion::{black_box, criterion_group, criterion_main, Criterion};

fn one_dimensional(c: &mut Criterion) {
    let l = scale_target(0.5);
    c.bench_function("cdf_solve_1d", |b| b.iter(|| solve_1d(black_box(&l), &Cdf1dOptions::default()).unwrap()));
    let sol = solve_1d(&l, &Cdf1dOptions::default()).unwrap();
    let pts = line(-4.0, 4.0, 81);
    c.bench_function("ma_residual_81_points", |b| b.iter(|| ma_residual(&sol, &l, black_box(&pts)).unwrap()));
}

fn two_dimensional(c: &mut Criterion) {
    let sigma = covariance_2d();
    c.bench_function("gaussian_closed_form_2d", |b| b.iter(|| solve_gaussian(black_box(&sigma)).unwrap()));
    let l = DensitySpec::gaussian_covariance(&sigma).unwrap();
    let grid = GridSpec::new(2, 4.0, 21).unwrap();
    let mut group = c.benchmark_group("grid");
    group.sample_size(10);
    group.bench_function("entropic_21x21", |b| {
        b.iter(|| solve_grid_entropic(&l, &grid, &EntropicOptions::for_grid(&grid)).unwrap())
    });
    group.finish();
}

fn operators(c: &mut Criterion) {
    let k = PerturbationOperator::from_row_slice(2, &[-0.3, 0.2, 0.1, 0.4]).unwrap();
    c.bench_function("polar_decompose_2x2", |b| b.iter(|| polar_decompose(black_box(&k)).unwrap()));
    c.bench_function("lambda_k_2x2", |b| b.iter(|| lambda_k(&k, black_box(&[0.3, -1.2])).unwrap()));
    let atoms: Vec<Vec<f64>> = (0..6).map(|i| vec![(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()]).collect();
    let images: Vec<Vec<f64>> = (0..6).map(|i| vec![(i as f64 * 2.1).cos(), (i as f64 * 0.4).sin()]).collect();
    c.bench_function("polar_discrete_6", |b| b.iter(|| polar_factorize_discrete(black_box(&atoms), &images).unwrap()));
}

criterion_group!(benches, one_dimensional, two_dimensional, operators);
criterion_main!(benches);
