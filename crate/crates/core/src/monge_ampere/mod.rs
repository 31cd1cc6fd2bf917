//! The Gaussian Jacobian `Λ(φ) = det₂(I + ∇²φ) exp(-𝓛φ - ½|∇φ|²)` and the
//! identities it satisfies along optimal transport maps.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::gaussian::quadrature::integrate;
use crate::gaussian::{
    check_h_log_concave, expect, relative_entropy, standard_log_density, DensitySpec, Differentiation, GaussianSpace,
    Method, ScalarField,
};
use crate::stats::{std_normal_pdf, MeanEstimate};
use crate::transport::{solve_1d, solve_grid_entropic, Cdf1dOptions, EntropicOptions, GridSpec, MatrixMap, SolverKind, TransportSolution, VectorMap};

/// Relative agreement required between the two routes to `Λ(φ)`.
pub const CROSS_CHECK_TOL: f64 = 1e-9;
/// Smallest Gaussian mass accepted by [`convex_set_mass`].
pub const MIN_SET_MASS: f64 = 1e-3;

/// `𝓛φ(x) = x·∇φ(x) - Δφ(x)`.
pub fn ou_operator(phi: &ScalarField, x: &[f64]) -> f64 {
    let g = phi.gradient(x);
    let h = phi.hessian(x);
    DVector::from_column_slice(x).dot(&g) - h.trace()
}

#[derive(Debug, Clone, Copy)]
struct Pointwise {
    lambda: f64,
    log_det2: f64,
}

/// `Λ` from the gradient `g = ∇φ(x)` and `DT = I + ∇²φ(x)`.
fn evaluate(x: &[f64], g: DVector<f64>, dt: DMatrix<f64>) -> Result<Pointwise> {
    if g.iter().chain(dt.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { node: x.to_vec() });
    }
    let n = x.len();
    let mu = SymmetricEigen::new(dt.clone()).eigenvalues;
    let lo = mu.min();
    if lo <= 0.0 {
        return Err(Error::NotMonotone {
            point: x.to_vec(),
            eigenvalue: lo - 1.0,
        });
    }
    let log_det2: f64 = mu.iter().map(|&m| m.ln() - (m - 1.0)).sum();
    let xv = DVector::from_column_slice(x);
    let lop = xv.dot(&g) - (dt.trace() - n as f64);
    let lambda = (log_det2 - lop - 0.5 * g.norm_squared()).exp();

    let det = dt.lu().determinant();
    let t = &xv + &g;
    let other = det * (standard_log_density(t.as_slice()) - standard_log_density(x)).exp();
    let scale = lambda.abs().max(other.abs());
    if (lambda - other).abs() > CROSS_CHECK_TOL * scale {
        return Err(Error::CrossCheck(format!(
            "Λ(φ)({x:?}) = {lambda} but det(I+∇²φ)γ(T)/γ = {other}"
        )));
    }
    Ok(Pointwise { lambda, log_det2 })
}

fn pointwise(phi: &ScalarField, x: &[f64]) -> Result<Pointwise> {
    check_dim(phi.dim(), x.len())?;
    let n = x.len();
    evaluate(x, phi.gradient(x), DMatrix::identity(n, n) + phi.hessian(x))
}

fn pointwise_solution(solution: &TransportSolution, x: &[f64]) -> Result<Pointwise> {
    check_dim(solution.dim(), x.len())?;
    evaluate(x, solution.phi.gradient(x), solution.derivative(x))
}

/// `Λ(φ)(x)`, cross-checked against `det(I + ∇²φ(x)) γ(T(x)) / γ(x)`.
pub fn jacobian(phi: &ScalarField, x: &[f64]) -> Result<f64> {
    Ok(pointwise(phi, x)?.lambda)
}

/// [`jacobian`] of the forward potential, using the solver's own `DT` when
/// it has one.
pub fn solution_jacobian(solution: &TransportSolution, x: &[f64]) -> Result<f64> {
    Ok(pointwise_solution(solution, x)?.lambda)
}

/// `log det₂(I + ∇²φ(x))`.
pub fn log_det2(phi: &ScalarField, x: &[f64]) -> Result<f64> {
    Ok(pointwise(phi, x)?.log_det2)
}

/// `Λ(φ)(x) · L(T(x))` at each point.
pub fn ma_products(solution: &TransportSolution, l: &DensitySpec, points: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_dim(solution.dim(), l.dim())?;
    points
        .par_iter()
        .map(|x| {
            let lambda = solution_jacobian(solution, x)?;
            let t = solution.forward(x);
            Ok(lambda * l.density(t.as_slice()))
        })
        .collect()
}

fn require_log_concave(l: &DensitySpec, points: &[Vec<f64>]) -> Result<()> {
    if !l.is_h_convex {
        return Err(Error::InvalidArgument("target density is not declared H-log-concave".into()));
    }
    let report = check_h_log_concave(l, points)?;
    if !report.holds {
        return Err(Error::NotLogConcave {
            point: report.worst_point,
            eigenvalue: report.worst_eigenvalue,
        });
    }
    Ok(())
}

/// `sup |Λ(φ) · L∘T - 1|` over the test points.
pub fn ma_residual(solution: &TransportSolution, l: &DensitySpec, points: &[Vec<f64>]) -> Result<f64> {
    require_log_concave(l, points)?;
    Ok(ma_products(solution, l, points)?
        .into_iter()
        .map(|p| (p - 1.0).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsolutionReport {
    pub holds: bool,
    pub max_product: f64,
    pub min_product: f64,
}

/// `Λ(φ) · L∘T ≤ 1 + tol` at every test point.
pub fn subsolution_check(
    solution: &TransportSolution,
    l: &DensitySpec,
    points: &[Vec<f64>],
    tol: f64,
) -> Result<SubsolutionReport> {
    let products = ma_products(solution, l, points)?;
    let max_product = products.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_product = products.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(SubsolutionReport {
        holds: max_product <= 1.0 + tol,
        max_product,
        min_product,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularityReport {
    /// `E[|∇φ|² + ‖∇²φ‖²]` (Hilbert-Schmidt norm).
    pub lhs: MeanEstimate,
    /// `2 E[L log L]`.
    pub rhs: MeanEstimate,
}

impl RegularityReport {
    pub fn holds(&self, sigmas: f64) -> bool {
        self.lhs.mean <= self.rhs.mean + sigmas * self.lhs.std_error.hypot(self.rhs.std_error)
    }
}

pub fn regularity_bound(
    solution: &TransportSolution,
    l: &DensitySpec,
    space: &GaussianSpace,
    method: Method,
) -> Result<RegularityReport> {
    check_dim(solution.dim(), l.dim())?;
    let space = space.with_dim(l.dim());
    let phi = &solution.phi;
    let lhs = expect(
        |x| phi.gradient(x).norm_squared() + phi.hessian(x).norm_squared(),
        &space,
        method,
    )?;
    let entropy = relative_entropy(l, &space, method)?;
    Ok(RegularityReport {
        lhs,
        rhs: MeanEstimate {
            mean: 2.0 * entropy.mean,
            std_error: 2.0 * entropy.std_error,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceReport {
    /// `½ d² = ½ E|∇φ|²`.
    pub half_d2: MeanEstimate,
    pub entropy: MeanEstimate,
    /// `E[log det₂(I + ∇²φ)]`.
    pub log_det2: MeanEstimate,
}

impl DistanceReport {
    pub fn entropy_plus_logdet(&self) -> f64 {
        self.entropy.mean + self.log_det2.mean
    }

    /// `½d²` and `E[L log L] + E[log det₂]` agree within `sigmas` standard
    /// errors plus `tol`.
    pub fn agrees(&self, sigmas: f64, tol: f64) -> bool {
        let se = (self.half_d2.std_error.powi(2) + self.entropy.std_error.powi(2) + self.log_det2.std_error.powi(2)).sqrt();
        (self.half_d2.mean - self.entropy_plus_logdet()).abs() <= sigmas * se + tol
    }

    /// `E[log det₂] ≤ 0` and `d² ≤ 2 E[L log L]`, each up to `tol`.
    pub fn talagrand_holds(&self, tol: f64) -> bool {
        self.log_det2.mean <= tol && self.half_d2.mean <= self.entropy.mean + tol
    }
}

pub fn distance_identity(
    solution: &TransportSolution,
    l: &DensitySpec,
    space: &GaussianSpace,
    method: Method,
) -> Result<DistanceReport> {
    check_dim(solution.dim(), l.dim())?;
    let space = space.with_dim(l.dim());
    let phi = &solution.phi;
    let half_d2 = expect(|x| 0.5 * phi.gradient(x).norm_squared(), &space, method)?;
    let log_det2 = expect_fallible(|x| Ok(pointwise_solution(solution, x)?.log_det2), &space, method)?;
    let entropy = relative_entropy(l, &space, method)?;
    Ok(DistanceReport {
        half_d2,
        entropy,
        log_det2,
    })
}

/// [`expect`] for integrands that can fail; the first error wins.
fn expect_fallible<G>(g: G, space: &GaussianSpace, method: Method) -> Result<MeanEstimate>
where
    G: Fn(&[f64]) -> Result<f64> + Sync,
{
    let failure = std::sync::Mutex::new(None);
    let estimate = expect(
        |x| match g(x) {
            Ok(v) => v,
            Err(e) => {
                failure.lock().expect("failure slot").get_or_insert(e);
                0.0
            }
        },
        space,
        method,
    )?;
    match failure.into_inner().expect("failure slot") {
        Some(e) => Err(e),
        None => Ok(estimate),
    }
}

#[derive(Debug, Clone)]
pub struct JacobianReport {
    pub lambda_values: Vec<(Vec<f64>, f64)>,
    pub ma_residuals: Vec<f64>,
    pub det2_log_mean: f64,
    pub entropy: f64,
    pub cost_half: f64,
}

impl JacobianReport {
    pub fn max_residual(&self) -> f64 {
        self.ma_residuals.iter().copied().fold(0.0, f64::max)
    }
}

pub fn jacobian_report(
    solution: &TransportSolution,
    l: &DensitySpec,
    points: &[Vec<f64>],
    space: &GaussianSpace,
    method: Method,
) -> Result<JacobianReport> {
    let lambdas = points
        .par_iter()
        .map(|x| solution_jacobian(solution, x))
        .collect::<Result<Vec<f64>>>()?;
    let ma_residuals = lambdas
        .iter()
        .zip(points)
        .map(|(lam, x)| (lam * l.density(solution.forward(x).as_slice()) - 1.0).abs())
        .collect();
    let distance = distance_identity(solution, l, space, method)?;
    Ok(JacobianReport {
        lambda_values: points.iter().cloned().zip(lambdas).collect(),
        ma_residuals,
        det2_log_mean: distance.log_det2.mean,
        entropy: distance.entropy.mean,
        cost_half: distance.half_d2.mean,
    })
}

/// How [`convex_set_mass`] solves the transport problem.
#[derive(Debug, Clone)]
pub enum SetSolver {
    /// Exact coordinatewise rearrangement (boxes are products of intervals).
    Cdf(Cdf1dOptions),
    /// Entropic grid solver on a mollified indicator; the mollifier width is
    /// the grid spacing.
    Grid(GridSpec),
}

#[derive(Debug, Clone)]
pub struct ConvexSetReport {
    pub mu_direct: f64,
    /// Mean of `Λ(φ)` over the test points.
    pub lambda_constant: f64,
    /// `max Λ - min Λ` over the test points.
    pub lambda_spread: f64,
    /// `exp(-½d² + E[log det₂])`.
    pub formula_value: f64,
    pub solution: TransportSolution,
}

/// Transports `μ` onto `μ` conditioned on the box `A` and recovers `μ(A)`
/// from the Jacobian and from the distance formula.
pub fn convex_set_mass(
    bounds: &[(f64, f64)],
    solver: &SetSolver,
    points: &[Vec<f64>],
    space: &GaussianSpace,
) -> Result<ConvexSetReport> {
    let l = DensitySpec::box_indicator(bounds)?;
    let mu_direct = l.normalization;
    if mu_direct < MIN_SET_MASS {
        return Err(Error::Degenerate(format!("set mass {mu_direct:e} is below {MIN_SET_MASS:e}")));
    }
    if points.is_empty() {
        return Err(Error::InvalidArgument("no test points".into()));
    }
    let dim = bounds.len();
    let solution = match solver {
        SetSolver::Cdf(opts) => {
            let parts = bounds
                .iter()
                .map(|&b| solve_1d(&DensitySpec::box_indicator(&[b])?, opts))
                .collect::<Result<Vec<_>>>()?;
            product_solution(parts)
        }
        SetSolver::Grid(grid) => {
            if grid.dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: grid.dim,
                });
            }
            let soft = mollified_box(bounds, grid.spacing())?;
            solve_grid_entropic(&soft, grid, &EntropicOptions::for_grid(grid))?
        }
    };
    let lambdas = points
        .par_iter()
        .map(|x| solution_jacobian(&solution, x))
        .collect::<Result<Vec<f64>>>()?;
    let lo = lambdas.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = lambdas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let space = space.with_dim(dim);
    let method = if dim == 1 { Method::AdaptiveLine } else { space.default_method() };
    let phi = &solution.phi;
    let half_d2 = expect(|x| 0.5 * phi.gradient(x).norm_squared(), &space, method)?.mean;
    let log_det = expect_fallible(|x| Ok(pointwise_solution(&solution, x)?.log_det2), &space, method)?.mean;
    Ok(ConvexSetReport {
        mu_direct,
        lambda_constant: lambdas.iter().sum::<f64>() / lambdas.len() as f64,
        lambda_spread: hi - lo,
        formula_value: (-half_d2 + log_det).exp(),
        solution,
    })
}

/// `L ∝ Π σ((x_i - lo_i)/δ) σ((hi_i - x_i)/δ)` with the logistic `σ`; the
/// exponent is convex.
fn mollified_box(bounds: &[(f64, f64)], width: f64) -> Result<DensitySpec> {
    let b = bounds.to_vec();
    let dim = b.len();
    let axis_terms = move |x: &[f64]| -> (f64, DVector<f64>, DMatrix<f64>) {
        let mut v = 0.0;
        let mut g = DVector::zeros(dim);
        let mut h = DMatrix::zeros(dim, dim);
        for (i, &(lo, hi)) in b.iter().enumerate() {
            for (z, sign) in [((x[i] - lo) / width, 1.0), ((hi - x[i]) / width, -1.0)] {
                if !z.is_finite() {
                    continue;
                }
                // -log σ(z) = softplus(-z)
                let sp = if z > 0.0 { (-z).exp().ln_1p() } else { -z + z.exp().ln_1p() };
                let s = 1.0 / (1.0 + (-z).exp());
                v += sp;
                g[i] += -(1.0 - s) * sign / width;
                h[(i, i)] += s * (1.0 - s) / (width * width);
            }
        }
        (v, g, h)
    };
    let (a1, a2, a3) = (axis_terms.clone(), axis_terms.clone(), axis_terms);
    let exponent = ScalarField::new(dim, move |x| a1(x).0, move |x| a2(x).1, move |x| a3(x).2);
    let mut c = 1.0;
    for &(lo, hi) in bounds {
        let f = |t: f64| {
            let mut p = std_normal_pdf(t);
            if lo.is_finite() {
                p /= 1.0 + (-(t - lo) / width).exp();
            }
            if hi.is_finite() {
                p /= 1.0 + (-(hi - t) / width).exp();
            }
            p
        };
        c *= integrate(f, (lo - 20.0 * width).max(-40.0), (hi + 20.0 * width).min(40.0), 1e-14);
    }
    DensitySpec::new(exponent, c, Some(0.0), true)
}

/// Joins one-dimensional solutions into the coordinatewise map on `R^n`.
fn product_solution(parts: Vec<TransportSolution>) -> TransportSolution {
    if parts.len() == 1 {
        return parts.into_iter().next().expect("one part");
    }
    let parts = Arc::new(parts);
    let dim = parts.len();
    let field = |potential: fn(&TransportSolution) -> &ScalarField| {
        let (p1, p2, p3) = (parts.clone(), parts.clone(), parts.clone());
        ScalarField::from_parts(
            dim,
            Arc::new(move |x| p1.iter().zip(x).map(|(s, v)| potential(s).value(&[*v])).sum()),
            Arc::new(move |x| DVector::from_iterator(dim, p2.iter().zip(x).map(|(s, v)| potential(s).gradient(&[*v])[0]))),
            Arc::new(move |x| {
                DMatrix::from_diagonal(&DVector::from_iterator(
                    dim,
                    p3.iter().zip(x).map(|(s, v)| potential(s).hessian(&[*v])[(0, 0)]),
                ))
            }),
            Differentiation::ClosedForm,
        )
    };
    let phi = field(|s| &s.phi);
    let psi = field(|s| &s.psi);
    let p = parts.clone();
    let inverse: VectorMap = Arc::new(move |y| DVector::from_iterator(dim, p.iter().zip(y).map(|(s, v)| s.inverse(&[*v])[0])));
    let p = parts.clone();
    let derivative: MatrixMap = Arc::new(move |x| {
        DMatrix::from_diagonal(&DVector::from_iterator(dim, p.iter().zip(x).map(|(s, v)| s.derivative(&[*v])[(0, 0)])))
    });
    let cost = parts.iter().map(|s| s.cost).sum();
    TransportSolution::new(phi, psi, inverse, cost, SolverKind::Cdf1d).with_derivative(derivative)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaffarelliReport {
    pub holds: bool,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    /// Whether the target was declared H-log-concave, i.e. whether the
    /// contraction property is expected at all.
    pub applicable: bool,
}

/// Eigenvalues of `∇²φ` lie in `[-1 - tol, tol]` at every test point.
pub fn caffarelli_check(
    solution: &TransportSolution,
    l: &DensitySpec,
    points: &[Vec<f64>],
    tol: f64,
) -> Result<CaffarelliReport> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in points {
        check_dim(solution.dim(), x.len())?;
        let h = solution.phi.hessian(x);
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { node: x.clone() });
        }
        let eig = SymmetricEigen::new(h).eigenvalues;
        lo = lo.min(eig.min());
        hi = hi.max(eig.max());
    }
    Ok(CaffarelliReport {
        holds: lo >= -1.0 - tol && hi <= tol,
        min_eigenvalue: lo,
        max_eigenvalue: hi,
        applicable: l.is_h_convex,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpolationRow {
    pub t: f64,
    /// Largest `L_t(T_t x)` over the test points.
    pub max_density: f64,
    /// `e^{αt} / c`.
    pub bound: f64,
}

impl InterpolationRow {
    pub fn holds(&self, tol: f64) -> bool {
        self.max_density <= self.bound + tol
    }
}

/// Densities of `(I + t∇φ)μ` evaluated along the interpolation by change of
/// variables, against the bound `e^{αt}/c`.
pub fn interpolation_bound(
    solution: &TransportSolution,
    l: &DensitySpec,
    ts: &[f64],
    points: &[Vec<f64>],
) -> Result<Vec<InterpolationRow>> {
    let alpha = l.alpha_lower_bound.ok_or_else(|| {
        Error::Unsupported("the exponent has no declared lower bound; the interpolation bound does not apply".into())
    })?;
    check_dim(solution.dim(), l.dim())?;
    let geometry: Vec<(Vec<f64>, DVector<f64>, DMatrix<f64>)> = points
        .iter()
        .map(|x| (x.clone(), solution.phi.gradient(x), solution.phi.hessian(x)))
        .collect();
    let n = l.dim();
    ts.iter()
        .map(|&t| {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidArgument(format!("interpolation time {t} outside [0, 1]")));
            }
            let mut max_density = f64::NEG_INFINITY;
            for (x, g, h) in &geometry {
                let m = DMatrix::identity(n, n) + h * t;
                let lo = SymmetricEigen::new(h * t).eigenvalues.min();
                if lo <= -1.0 {
                    return Err(Error::NotMonotone {
                        point: x.clone(),
                        eigenvalue: lo,
                    });
                }
                let tx = DVector::from_column_slice(x) + g * t;
                let log_lt = standard_log_density(x) - standard_log_density(tx.as_slice()) - m.lu().determinant().ln();
                max_density = max_density.max(log_lt.exp());
            }
            Ok(InterpolationRow {
                t,
                max_density,
                bound: (alpha * t).exp() / l.normalization,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
