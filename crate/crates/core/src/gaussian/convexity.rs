use nalgebra::{DMatrix, SymmetricEigen};

use super::density::DensitySpec;
use super::field::ScalarField;
use crate::error::{check_dim, Error, Result};

/// Tolerance on Hessian eigenvalues for the convexity predicates.
pub const EIGEN_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexityReport {
    pub holds: bool,
    pub worst_eigenvalue: f64,
    pub worst_point: Vec<f64>,
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

fn worst_eigenvalue(field: &ScalarField, grid: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("convexity grid is empty".into()));
    }
    let mut worst = (f64::INFINITY, Vec::new());
    for x in grid {
        check_dim(field.dim(), x.len())?;
        let h = field.hessian(x);
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { node: x.clone() });
        }
        let lo = min_eigenvalue(&h);
        if lo < worst.0 {
            worst = (lo, x.clone());
        }
    }
    Ok(worst)
}

/// `φ` is 1-convex iff every Hessian eigenvalue is at least `-1`.
pub fn check_one_convex(phi: &ScalarField, grid: &[Vec<f64>]) -> Result<ConvexityReport> {
    let (worst_eigenvalue, worst_point) = worst_eigenvalue(phi, grid)?;
    Ok(ConvexityReport {
        holds: worst_eigenvalue >= -1.0 - EIGEN_TOL,
        worst_eigenvalue,
        worst_point,
    })
}

/// `L = e^{-f}/c` is H-log-concave iff `f` is convex.
pub fn check_h_log_concave(l: &DensitySpec, grid: &[Vec<f64>]) -> Result<ConvexityReport> {
    let (worst_eigenvalue, worst_point) = worst_eigenvalue(&l.exponent, grid)?;
    Ok(ConvexityReport {
        holds: worst_eigenvalue >= -EIGEN_TOL,
        worst_eigenvalue,
        worst_point,
    })
}

/// Tensor grid of `per_axis^dim` points on `[-radius, radius]^dim`.
pub fn box_grid(dim: usize, radius: f64, per_axis: usize) -> Vec<Vec<f64>> {
    assert!(per_axis >= 2);
    let axis: Vec<f64> = (0..per_axis)
        .map(|i| -radius + 2.0 * radius * i as f64 / (per_axis - 1) as f64)
        .collect();
    let mut out = vec![Vec::new()];
    for _ in 0..dim {
        out = out
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&a| {
                    let mut q = p.clone();
                    q.push(a);
                    q
                })
            })
            .collect();
    }
    out
}
