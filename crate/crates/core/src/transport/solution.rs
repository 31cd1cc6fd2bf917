use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::gaussian::{Differentiation, ScalarField};

pub type VectorMap = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;
pub type MatrixMap = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolverKind {
    Cdf1d,
    GaussianClosedForm,
    GridEntropic,
}

impl SolverKind {
    pub fn name(&self) -> &'static str {
        match self {
            SolverKind::Cdf1d => "cdf_1d",
            SolverKind::GaussianClosedForm => "gaussian_closed_form",
            SolverKind::GridEntropic => "grid_entropic",
        }
    }

    /// Accuracy to which `S∘T = I` is expected to hold.
    pub fn inversion_tolerance(&self) -> f64 {
        match self {
            SolverKind::Cdf1d => 1e-8,
            SolverKind::GaussianClosedForm => 1e-10,
            SolverKind::GridEntropic => 0.5,
        }
    }
}

/// Optimal transport from the standard Gaussian to `L·μ`: potentials
/// `φ`, `ψ`, the maps `T = I + ∇φ` and `S = T⁻¹ = I + ∇ψ`, and the cost
/// `∫|T(x) - x|² μ(dx)`.
#[derive(Clone)]
pub struct TransportSolution {
    pub phi: ScalarField,
    pub psi: ScalarField,
    inverse: VectorMap,
    /// `DT = I + ∇²φ` computed directly, for solvers where forming
    /// `1 + (T' - 1)` would cancel.
    derivative: Option<MatrixMap>,
    pub cost: f64,
    pub solver: SolverKind,
    /// Solver-specific numbers such as marginal errors or curl residuals.
    pub diagnostics: BTreeMap<&'static str, f64>,
}

impl fmt::Debug for TransportSolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TransportSolution")
            .field("dim", &self.dim())
            .field("cost", &self.cost)
            .field("solver", &self.solver)
            .field("diagnostics", &self.diagnostics)
            .finish()
    }
}

impl TransportSolution {
    /// The forward map is always `x + ∇φ(x)`; `inverse` is the map `S`.
    pub fn new(phi: ScalarField, psi: ScalarField, inverse: VectorMap, cost: f64, solver: SolverKind) -> Self {
        Self {
            phi,
            psi,
            inverse,
            derivative: None,
            cost,
            solver,
            diagnostics: BTreeMap::new(),
        }
    }

    /// Builds the solution from a forward potential alone; `S = I + ∇ψ`.
    pub fn from_potentials(phi: ScalarField, psi: ScalarField, cost: f64, solver: SolverKind) -> Self {
        let p = psi.clone();
        let inverse: VectorMap = Arc::new(move |y| DVector::from_column_slice(y) + p.gradient(y));
        Self::new(phi, psi, inverse, cost, solver)
    }

    pub fn dim(&self) -> usize {
        self.phi.dim()
    }

    pub fn forward(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x) + self.phi.gradient(x)
    }

    pub fn with_derivative(mut self, derivative: MatrixMap) -> Self {
        self.derivative = Some(derivative);
        self
    }

    /// `DT(x) = I + ∇²φ(x)`.
    pub fn derivative(&self, x: &[f64]) -> DMatrix<f64> {
        match &self.derivative {
            Some(d) => d(x),
            None => DMatrix::identity(x.len(), x.len()) + self.phi.hessian(x),
        }
    }

    pub fn inverse(&self, y: &[f64]) -> DVector<f64> {
        (self.inverse)(y)
    }

    pub fn forward_map(&self) -> VectorMap {
        let phi = self.phi.clone();
        Arc::new(move |x| DVector::from_column_slice(x) + phi.gradient(x))
    }

    pub fn inverse_map(&self) -> VectorMap {
        self.inverse.clone()
    }

    /// `max |S(T(x)) - x|` over the given points.
    pub fn inversion_error(&self, points: &[Vec<f64>]) -> f64 {
        points
            .iter()
            .map(|x| {
                let t = self.forward(x);
                (self.inverse(t.as_slice()) - DVector::from_column_slice(x)).norm()
            })
            .fold(0.0, f64::max)
    }

    pub fn with_diagnostic(mut self, key: &'static str, value: f64) -> Self {
        self.diagnostics.insert(key, value);
        self
    }
}

/// `ψ(y) = -φ(S(y)) - ½|y - S(y)|²`, with `∇ψ = S - I` and a supplied
/// Hessian. Off the range of `T` (where `S` is infinite) `ψ = +∞`.
pub(crate) fn backward_potential(
    phi: &ScalarField,
    inverse: VectorMap,
    hessian: Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>,
    mode: Differentiation,
) -> ScalarField {
    let dim = phi.dim();
    let (p, s1, s2) = (phi.clone(), inverse.clone(), inverse);
    let value = move |y: &[f64]| {
        let x = s1(y);
        if x.iter().any(|v| !v.is_finite()) {
            return f64::INFINITY;
        }
        -p.value(x.as_slice()) - 0.5 * (DVector::from_column_slice(y) - &x).norm_squared()
    };
    let gradient = move |y: &[f64]| s2(y) - DVector::from_column_slice(y);
    ScalarField::from_parts(dim, Arc::new(value), Arc::new(gradient), hessian, mode)
}
