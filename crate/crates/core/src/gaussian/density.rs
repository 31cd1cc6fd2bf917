use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::field::ScalarField;
use super::space::{expect, GaussianSpace, Method};
use crate::error::{Error, Result};
use crate::stats::{std_normal_cdf, std_normal_sf, MeanEstimate};

/// A probability density `L = e^{-f} / c` with respect to the standard
/// Gaussian measure.
#[derive(Clone, Debug)]
pub struct DensitySpec {
    pub exponent: ScalarField,
    /// `c = E[e^{-f}]`.
    pub normalization: f64,
    /// `α` with `f ≥ -α`, when one exists.
    pub alpha_lower_bound: Option<f64>,
    pub is_h_convex: bool,
}

impl DensitySpec {
    pub fn new(
        exponent: ScalarField,
        normalization: f64,
        alpha_lower_bound: Option<f64>,
        is_h_convex: bool,
    ) -> Result<Self> {
        if !(normalization > 0.0 && normalization.is_finite()) {
            return Err(Error::NotIntegrable(format!("normalization {normalization}")));
        }
        Ok(Self {
            exponent,
            normalization,
            alpha_lower_bound,
            is_h_convex,
        })
    }

    /// Computes `c = E[e^{-f}]` numerically.
    pub fn from_exponent(exponent: ScalarField, space: &GaussianSpace, method: Method, is_h_convex: bool) -> Result<Self> {
        let space = space.with_dim(exponent.dim());
        let c = expect(|x| (-exponent.value(x)).exp(), &space, method)?.mean;
        Self::new(exponent, c, None, is_h_convex)
    }

    /// Wraps an already normalized positive density field `l` as `e^{-f}`
    /// with `f = -log l` and `c = 1`; derivatives follow from those of `l`.
    pub fn from_density_field(l: ScalarField, is_h_convex: bool) -> Self {
        let dim = l.dim();
        let (lv, lg, lh) = (l.clone(), l.clone(), l);
        let exponent = ScalarField::new(
            dim,
            move |x| -lv.value(x).ln(),
            move |x| -lg.gradient(x) / lg.value(x),
            move |x| {
                let v = lh.value(x);
                let g = lh.gradient(x);
                -lh.hessian(x) / v + (&g * g.transpose()) / (v * v)
            },
        );
        Self {
            exponent,
            normalization: 1.0,
            alpha_lower_bound: None,
            is_h_convex,
        }
    }

    /// `L ≡ 1`.
    pub fn uniform(dim: usize) -> Self {
        Self {
            exponent: ScalarField::zero(dim),
            normalization: 1.0,
            alpha_lower_bound: Some(0.0),
            is_h_convex: true,
        }
    }

    /// Density of `N(0, s²)` against `N(0, 1)`.
    pub fn gaussian_scale(s: f64) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {s}")));
        }
        let a = 1.0 / (s * s) - 1.0;
        let exponent = ScalarField::quadratic(DMatrix::from_element(1, 1, a), DVector::zeros(1), 0.0);
        Ok(Self {
            exponent,
            normalization: s,
            alpha_lower_bound: (a >= 0.0).then_some(0.0),
            is_h_convex: a >= 0.0,
        })
    }

    /// Density of `N(m, 1)` against `N(0, 1)`.
    pub fn gaussian_shift(m: f64) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::InvalidArgument(format!("shift must be finite, got {m}")));
        }
        Ok(Self {
            exponent: ScalarField::linear(DVector::from_element(1, -m)),
            normalization: (0.5 * m * m).exp(),
            alpha_lower_bound: (m == 0.0).then_some(0.0),
            is_h_convex: true,
        })
    }

    /// Density of `N(0, Σ)` against `N(0, I)` for positive definite `Σ`.
    pub fn gaussian_covariance(sigma: &DMatrix<f64>) -> Result<Self> {
        let eig = crate::linear::checked_symmetric_eigen(sigma)?;
        let min = eig.eigenvalues.min();
        if min <= 0.0 {
            return Err(Error::Indefinite { eigenvalue: min });
        }
        let n = sigma.nrows();
        let inv = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l))
            * eig.eigenvectors.transpose();
        let a = inv - DMatrix::identity(n, n);
        let convex = SymmetricEigen::new(a.clone()).eigenvalues.min() >= -1e-12;
        Ok(Self {
            exponent: ScalarField::quadratic(a, DVector::zeros(n), 0.0),
            normalization: eig.eigenvalues.product().sqrt(),
            alpha_lower_bound: convex.then_some(0.0),
            is_h_convex: convex,
        })
    }

    /// `L = 1_A / μ(A)` for the box `A = Π [lo_i, hi_i]` (bounds may be infinite).
    pub fn box_indicator(bounds: &[(f64, f64)]) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::InvalidArgument("box needs at least one axis".into()));
        }
        for &(lo, hi) in bounds {
            if !(lo < hi) {
                return Err(Error::InvalidArgument(format!("empty interval [{lo}, {hi}]")));
            }
        }
        let dim = bounds.len();
        let mass = box_mass(bounds);
        if !(mass > 0.0) {
            return Err(Error::Degenerate("box has zero Gaussian mass".into()));
        }
        let b = bounds.to_vec();
        let exponent = ScalarField::new(
            dim,
            move |x| {
                let inside = x.iter().zip(&b).all(|(v, (lo, hi))| *v >= *lo && *v <= *hi);
                if inside {
                    0.0
                } else {
                    f64::INFINITY
                }
            },
            move |_| DVector::zeros(dim),
            move |_| DMatrix::zeros(dim, dim),
        );
        Ok(Self {
            exponent,
            normalization: mass,
            alpha_lower_bound: Some(0.0),
            is_h_convex: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.exponent.dim()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        -self.exponent.value(x) - self.normalization.ln()
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        (-self.exponent.value(x)).exp() / self.normalization
    }

    /// `L` itself as a field, with derivatives taken from the exponent.
    pub fn density_field(&self) -> ScalarField {
        let (a, b, c) = (self.clone(), self.clone(), self.clone());
        ScalarField::new(
            self.dim(),
            move |x| a.density(x),
            move |x| -b.exponent.gradient(x) * b.density(x),
            move |x| {
                let g = c.exponent.gradient(x);
                (&g * g.transpose() - c.exponent.hessian(x)) * c.density(x)
            },
        )
    }
}

/// Standard Gaussian mass of an axis-aligned box.
pub fn box_mass(bounds: &[(f64, f64)]) -> f64 {
    bounds.iter().map(|&(lo, hi)| interval_mass(lo, hi)).product()
}

pub fn interval_mass(lo: f64, hi: f64) -> f64 {
    if lo >= 0.0 {
        std_normal_sf(lo) - std_normal_sf(hi)
    } else if hi <= 0.0 {
        std_normal_cdf(hi) - std_normal_cdf(lo)
    } else {
        1.0 - std_normal_cdf(lo) - std_normal_sf(hi)
    }
}

/// `E[L log L]` under the standard Gaussian, with `0 log 0 = 0`.
pub fn relative_entropy(l: &DensitySpec, space: &GaussianSpace, method: Method) -> Result<MeanEstimate> {
    let space = space.with_dim(l.dim());
    let mass = expect(|x| l.density(x), &space, method)?;
    let allowance = 1e-3 + 3.0 * mass.std_error;
    if (mass.mean - 1.0).abs() > allowance {
        return Err(Error::Unnormalized { mean: mass.mean });
    }
    expect(
        |x| {
            let v = l.density(x);
            if v == 0.0 {
                0.0
            } else {
                v * v.ln()
            }
        },
        &space,
        method,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        let s = GaussianSpace::standard(1).with_quadrature_order(60);
        let uniform = relative_entropy(&DensitySpec::uniform(1), &s, Method::Quadrature).unwrap();
        assert_eq!(uniform.mean, 0.0);

        let half = DensitySpec::gaussian_scale(0.5).unwrap();
        let e = relative_entropy(&half, &s, Method::Quadrature).unwrap().mean;
        let expected = 0.5 * (0.25 - 1.0 - 2.0 * 0.5f64.ln());
        assert!((e - expected).abs() < 1e-9, "{e} vs {expected}");
        assert!((expected - 0.318_147).abs() < 1e-6);

        let shift = DensitySpec::gaussian_shift(1.0).unwrap();
        let e = relative_entropy(&shift, &s, Method::Quadrature).unwrap().mean;
        assert!((e - 0.5).abs() < 1e-10);
    }

    #[test]
    fn indicator_entropy_on_adaptive_line() {
        let a = DensitySpec::box_indicator(&[(-1.0, 1.0)]).unwrap();
        let s = GaussianSpace::standard(1);
        let e = relative_entropy(&a, &s, Method::AdaptiveLine).unwrap().mean;
        assert!((e + 0.682_689_492_137_086f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn unnormalized_density_is_rejected() {
        let bad = DensitySpec::new(ScalarField::zero(1), 0.5, None, true).unwrap();
        let s = GaussianSpace::standard(1);
        assert!(matches!(relative_entropy(&bad, &s, Method::Quadrature), Err(Error::Unnormalized { .. })));
    }

    #[test]
    fn normalization_recomputes() {
        let s = GaussianSpace::standard(2).with_seed(3);
        let sigma = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let l = DensitySpec::gaussian_covariance(&sigma).unwrap();
        let again = DensitySpec::from_exponent(l.exponent.clone(), &s, Method::MonteCarlo, true).unwrap();
        let mc = expect(|x| (-l.exponent.value(x)).exp(), &s, Method::MonteCarlo).unwrap();
        assert!((again.normalization - l.normalization).abs() < 4.0 * mc.std_error);
        let quad = DensitySpec::from_exponent(l.exponent.clone(), &s.with_quadrature_order(48), Method::Quadrature, true).unwrap();
        assert!((quad.normalization - l.normalization).abs() < 1e-10);
    }

    #[test]
    fn density_field_derivatives() {
        let half = DensitySpec::gaussian_scale(0.5).unwrap();
        let l = half.density_field();
        let fd = ScalarField::finite_difference(1, move |x| half.density(x));
        for x in [-1.2, 0.3, 2.0] {
            assert!((l.gradient(&[x])[0] - fd.gradient(&[x])[0]).abs() < 1e-8);
            assert!((l.hessian(&[x])[(0, 0)] - fd.hessian(&[x])[(0, 0)]).abs() < 1e-5);
        }
    }

    #[test]
    fn density_field_round_trip() {
        let half = DensitySpec::gaussian_scale(0.5).unwrap();
        let h2 = half.clone();
        let l = ScalarField::finite_difference(1, move |x| h2.density(x));
        let wrapped = DensitySpec::from_density_field(l, true);
        for x in [-1.0, 0.0, 0.7] {
            assert!((wrapped.log_density(&[x]) - half.log_density(&[x])).abs() < 1e-12);
            assert!((wrapped.exponent.hessian(&[x])[(0, 0)] - 3.0).abs() < 1e-4);
        }
    }
}
