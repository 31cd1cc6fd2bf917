use nalgebra::DVector;

use super::discrete::{solve_discrete, squared_distance};
use crate::error::{Error, Result};
use crate::linear::{polar_decompose, PerturbationOperator};

/// `U = I + K = (I + K̄)(I + A)` read as transport followed by rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPolar {
    /// `K̄`: the optimal map from `μ` to `Uμ` is `I + K̄`.
    pub transport: PerturbationOperator,
    /// `A`: the `μ`-rotation is `I + A`.
    pub rotation: PerturbationOperator,
    pub recomposition_error: f64,
    pub isometry_defect: f64,
    /// `∫ |T(x) - x|² μ(dx) = ‖K̄‖²`.
    pub transport_cost: f64,
    /// `∫ |U(x) - R(x)|² μ(dx) = ‖K - A‖²`.
    pub rotation_distance: f64,
}

pub fn polar_factorize_linear(k: &PerturbationOperator) -> Result<LinearPolar> {
    let parts = polar_decompose(k)?;
    let recomposition_error = (parts.recompose() - k.identity_plus()).norm();
    let isometry_defect = parts.isometry_defect();
    let transport_cost = parts.kbar.norm_squared();
    let rotation_distance = (k.matrix() - &parts.a).norm_squared();
    Ok(LinearPolar {
        transport: PerturbationOperator::new(parts.kbar)?,
        rotation: PerturbationOperator::new(parts.a)?,
        recomposition_error,
        isometry_defect,
        transport_cost,
        rotation_distance,
    })
}

/// Polar factorization of a map `U` on an equal-weight atom cloud, given by
/// its images `U(x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePolar {
    /// Optimal map from the atoms to the images: `T(x_i) = images[transport[i]]`.
    pub transport: Vec<usize>,
    /// `R(x_i) = x_{rotation[i]}`, a permutation of the atoms.
    pub rotation: Vec<usize>,
    pub transport_cost: f64,
    /// `(1/m) Σ |U(x_i) - R(x_i)|²`.
    pub rotation_distance: f64,
}

impl DiscretePolar {
    /// `T(R(x_i))` as an index into the images; equals `i` when `U = T∘R`.
    pub fn recomposed(&self) -> Vec<usize> {
        self.rotation.iter().map(|&j| self.transport[j]).collect()
    }
}

pub fn polar_factorize_discrete(atoms: &[Vec<f64>], images: &[Vec<f64>]) -> Result<DiscretePolar> {
    let m = atoms.len();
    let optimal = solve_discrete(atoms, images)?;
    let mut rotation = vec![usize::MAX; m];
    for (i, &j) in optimal.assignment.iter().enumerate() {
        rotation[j] = i;
    }
    if rotation.contains(&usize::MAX) {
        return Err(Error::Degenerate("optimal assignment is not a bijection".into()));
    }
    let rotation_distance = (0..m)
        .map(|i| squared_distance(&images[i], &atoms[rotation[i]]))
        .sum::<f64>()
        / m as f64;
    Ok(DiscretePolar {
        transport: optimal.assignment,
        rotation,
        transport_cost: optimal.cost,
        rotation_distance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RightInverseReport {
    pub holds: bool,
    pub max_error: f64,
}

/// Checks `T(Θ(x)) = x` on the sample.
pub fn right_inverse_check<T, S>(t: T, theta: S, sample: &[Vec<f64>], tol: f64) -> RightInverseReport
where
    T: Fn(&[f64]) -> DVector<f64>,
    S: Fn(&[f64]) -> DVector<f64>,
{
    let max_error = sample
        .iter()
        .map(|x| (t(theta(x).as_slice()) - DVector::from_column_slice(x)).norm())
        .fold(0.0, f64::max);
    RightInverseReport {
        holds: max_error < tol,
        max_error,
    }
}
