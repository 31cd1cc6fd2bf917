use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::solution::{SolverKind, TransportSolution, VectorMap};
use crate::error::{Error, Result};
use crate::gaussian::ScalarField;
use crate::linear::{checked_symmetric_eigen, gaussian_target_operator};

/// Transport from `N(0, I)` to `N(0, Σ)`: `T = Σ^{1/2}`, `φ(x) = ½ x·Nx` with
/// `N = Σ^{1/2} - I`, and cost `tr Σ + n - 2 tr Σ^{1/2}`.
pub fn solve_gaussian(cov: &DMatrix<f64>) -> Result<TransportSolution> {
    let eig = checked_symmetric_eigen(cov)?;
    let min = eig.eigenvalues.min();
    if !(min > 0.0) {
        return Err(Error::Indefinite { eigenvalue: min });
    }
    let n = cov.nrows();
    let op = gaussian_target_operator(cov)?;
    let root = op.identity_plus();
    let inv_root = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()))
        * eig.eigenvectors.transpose();
    let inv_root = (&inv_root + inv_root.transpose()) * 0.5;
    let m = DMatrix::identity(n, n) - &inv_root;

    let phi = ScalarField::quadratic(op.matrix().clone(), DVector::zeros(n), 0.0);
    let psi = ScalarField::quadratic(-m, DVector::zeros(n), 0.0);
    let inverse: VectorMap = Arc::new(move |y| &inv_root * DVector::from_column_slice(y));
    let cost = cov.trace() + n as f64 - 2.0 * root.trace();
    Ok(TransportSolution::new(phi, psi, inverse, cost.max(0.0), SolverKind::GaussianClosedForm))
}
