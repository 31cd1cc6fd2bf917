//! Shared fixtures for the benchmarks.

use ampere::ito::{simulate_paths, BrownianEnsemble, CylindricalFunctional, TimeGrid};
use ampere::DensitySpec;
use nalgebra::DMatrix;

pub fn covariance_2d() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4])
}

pub fn scale_target(s: f64) -> DensitySpec {
    DensitySpec::gaussian_scale(s).expect("positive scale")
}

pub fn line(lo: f64, hi: f64, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| vec![lo + (hi - lo) * i as f64 / (n - 1) as f64]).collect()
}

/// Brownian paths and `f(w) = w(1)²/2` on a uniform grid.
pub fn endpoint_fixture(steps: usize, paths: usize) -> (BrownianEnsemble, CylindricalFunctional) {
    let grid = TimeGrid::uniform(steps).expect("steps > 0");
    let ensemble = simulate_paths(paths, &grid, 1).expect("paths > 0");
    let f = CylindricalFunctional::squared_endpoint(&grid, 1.0).expect("integrable");
    (ensemble, f)
}
