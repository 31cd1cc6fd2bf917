//! Linear Gaussian theory: finite-rank perturbations `I + K` of the identity,
//! their Carleman-Fredholm determinants, polar parts, Girsanov densities and
//! transport potentials.
//!
//! In `R^n` with the standard Gaussian, the divergence of a constant operator
//! is `δK(x) = Kx` and the second divergence is `δ²K(x) = x·Kx - tr K`.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};
use crate::gaussian::ScalarField;

/// Smallest `|det₂(I+K)|` treated as invertible.
pub const INVERTIBILITY_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-10;

/// An `n × n` matrix `K` standing for the perturbation `I + K`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationOperator {
    matrix: DMatrix<f64>,
}

impl PerturbationOperator {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::InvalidArgument(format!(
                "perturbation must be a nonempty square matrix, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("perturbation has non-finite entries".into()));
        }
        Ok(Self { matrix })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            matrix: DMatrix::zeros(dim, dim),
        }
    }

    pub fn from_row_slice(dim: usize, data: &[f64]) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: data.len(),
            });
        }
        Self::new(DMatrix::from_row_slice(dim, dim, data))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `I + K`.
    pub fn identity_plus(&self) -> DMatrix<f64> {
        &self.matrix + DMatrix::identity(self.dim(), self.dim())
    }

    fn ensure_invertible(&self) -> Result<f64> {
        let d = det2(self);
        if d.abs() > INVERTIBILITY_TOL {
            Ok(d)
        } else {
            Err(Error::NotInvertible { det2: d })
        }
    }
}

/// `I + K = (I + K̄)(I + A)` with `I + K̄` symmetric positive and `I + A`
/// an isometry.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarParts {
    pub kbar: DMatrix<f64>,
    pub a: DMatrix<f64>,
}

impl PolarParts {
    pub fn recompose(&self) -> DMatrix<f64> {
        let n = self.kbar.nrows();
        let id = DMatrix::identity(n, n);
        (&id + &self.kbar) * (&id + &self.a)
    }

    /// Frobenius norm of `A + Aᵀ + AᵀA`; zero exactly when `I + A` is an isometry.
    pub fn isometry_defect(&self) -> f64 {
        (&self.a + self.a.transpose() + self.a.transpose() * &self.a).norm()
    }
}

/// `det₂(I + K) = det(I + K) e^{-tr K}`, from an LU factorization.
pub fn det2(k: &PerturbationOperator) -> f64 {
    k.identity_plus().lu().determinant() * (-k.matrix.trace()).exp()
}

/// `Π (1 + λᵢ) e^{-λᵢ}` over the (complex) spectrum of `K`.
pub fn det2_spectral(k: &PerturbationOperator) -> f64 {
    let spectrum = k.matrix.clone().complex_eigenvalues();
    let one = Complex::new(1.0, 0.0);
    spectrum
        .iter()
        .fold(one, |acc, &l| acc * (one + l) * (-l).exp())
        .re
}

pub(crate) fn checked_symmetric_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !m.is_square() {
        return Err(Error::InvalidArgument(format!("matrix must be square, got {}x{}", m.nrows(), m.ncols())));
    }
    let asym = (m - m.transpose()).norm();
    if asym > SYMMETRY_TOL * m.norm().max(1.0) {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(SymmetricEigen::new((m + m.transpose()) * 0.5))
}

fn spectral_apply(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(f)) * eig.eigenvectors.transpose()
}

/// Positive square root of a symmetric positive semidefinite matrix.
pub fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = checked_symmetric_eigen(m)?;
    let min = eig.eigenvalues.min();
    if min < -SYMMETRY_TOL * m.norm().max(1.0) {
        return Err(Error::Indefinite { eigenvalue: min });
    }
    Ok(spectral_apply(&eig, |l| l.max(0.0).sqrt()))
}

/// Polar parts of `I + K`: `I + K̄ = ((I+K)(I+K)ᵀ)^{1/2}` by symmetric
/// eigendecomposition and `I + A = (I + K̄)^{-1}(I + K)`.
pub fn polar_decompose(k: &PerturbationOperator) -> Result<PolarParts> {
    k.ensure_invertible()?;
    let n = k.dim();
    let id = DMatrix::identity(n, n);
    let u = k.identity_plus();
    let gram = &u * u.transpose();
    let eig = checked_symmetric_eigen(&gram)?;
    if eig.eigenvalues.min() <= 0.0 {
        return Err(Error::NotInvertible { det2: det2(k) });
    }
    let positive = spectral_apply(&eig, f64::sqrt);
    let positive_inv = spectral_apply(&eig, |l| 1.0 / l.sqrt());
    let isometry = positive_inv * &u;
    Ok(PolarParts {
        kbar: positive - &id,
        a: isometry - id,
    })
}

/// `δK(x) = Kx`.
pub fn divergence_shift(k: &PerturbationOperator, x: &[f64]) -> Result<DVector<f64>> {
    check_dim(k.dim(), x.len())?;
    Ok(&k.matrix * DVector::from_column_slice(x))
}

/// `δ²K(x) = x·Kx - tr K`; a centred element of the second Wiener chaos.
pub fn second_divergence(k: &PerturbationOperator, x: &[f64]) -> Result<f64> {
    check_dim(k.dim(), x.len())?;
    let v = DVector::from_column_slice(x);
    Ok(v.dot(&(&k.matrix * &v)) - k.matrix.trace())
}

/// Girsanov density of `U = I + K`:
/// `Λ_K(x) = det₂(I+K) exp(-δ²K(x) - ½|Kx|²)`, so that
/// `∫ g(Ux) |Λ_K(x)| μ(dx) = ∫ g dμ`.
pub fn lambda_k(k: &PerturbationOperator, x: &[f64]) -> Result<f64> {
    let d = k.ensure_invertible()?;
    let shift = divergence_shift(k, x)?;
    let second = second_divergence(k, x)?;
    Ok(d * (-second - 0.5 * shift.norm_squared()).exp())
}

/// Density `dUμ/dμ` of the image of the standard Gaussian under `U = I + K`,
/// i.e. the `N(0, UUᵀ)` density divided by the `N(0, I)` density.
pub fn pushforward_density(k: &PerturbationOperator, y: &[f64]) -> Result<f64> {
    check_dim(k.dim(), y.len())?;
    let u = k.identity_plus();
    let lu = u.clone().lu();
    let det = lu.determinant();
    if det.abs() <= INVERTIBILITY_TOL {
        return Err(Error::NotInvertible { det2: det2(k) });
    }
    let yv = DVector::from_column_slice(y);
    let pre = lu.solve(&yv).ok_or(Error::NotInvertible { det2: det2(k) })?;
    Ok((-0.5 * pre.norm_squared() + 0.5 * yv.norm_squared()).exp() / det.abs())
}

/// Forward potential `φ = ½ δ²K̄`, i.e. `φ(x) = ½(x·K̄x - tr K̄)`.
pub fn linear_forward_potential(k: &PerturbationOperator) -> Result<ScalarField> {
    let parts = polar_decompose(k)?;
    let tr = parts.kbar.trace();
    Ok(ScalarField::quadratic(
        parts.kbar.clone(),
        DVector::zeros(k.dim()),
        -0.5 * tr,
    ))
}

/// Backward potential `ψ = -½ δ²M` with `M = (I + K̄)^{-1} K̄`.
pub fn linear_backward_potential(k: &PerturbationOperator) -> Result<ScalarField> {
    let m = backward_operator(k)?;
    let tr = m.trace();
    Ok(ScalarField::quadratic(-m, DVector::zeros(k.dim()), 0.5 * tr))
}

fn backward_operator(k: &PerturbationOperator) -> Result<DMatrix<f64>> {
    let parts = polar_decompose(k)?;
    let n = k.dim();
    let positive = DMatrix::identity(n, n) + &parts.kbar;
    let inv = positive
        .clone()
        .try_inverse()
        .ok_or(Error::NotInvertible { det2: det2(k) })?;
    let m = inv * &parts.kbar;
    Ok((&m + m.transpose()) * 0.5)
}

/// `N = Σ^{1/2} - I`: the symmetric perturbation whose map `(I + N)x` pushes
/// `N(0, I)` to `N(0, Σ)`; `Σ` may be singular.
pub fn gaussian_target_operator(cov: &DMatrix<f64>) -> Result<PerturbationOperator> {
    let root = sqrt_psd(cov)?;
    let n = cov.nrows();
    PerturbationOperator::new(root - DMatrix::identity(n, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{check_one_convex, expect, GaussianSpace, Method};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_operator(rng: &mut ChaCha8Rng, n: usize) -> PerturbationOperator {
        loop {
            let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.8..0.8));
            let k = PerturbationOperator::new(m).unwrap();
            let svd = k.identity_plus().svd(false, false);
            if svd.singular_values.min() > 0.1 {
                return k;
            }
        }
    }

    fn svd_polar_oracle(k: &PerturbationOperator) -> (DMatrix<f64>, DMatrix<f64>) {
        let svd = k.identity_plus().svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let positive = &u * DMatrix::from_diagonal(&svd.singular_values) * u.transpose();
        (positive, u * vt)
    }

    #[test]
    fn det2_examples() {
        assert_eq!(det2(&PerturbationOperator::zero(3)), 1.0);
        let k = PerturbationOperator::from_row_slice(2, &[0.5, 0.0, 0.0, -0.2]).unwrap();
        let expected = 1.5 * (-0.5f64).exp() * 0.8 * 0.2f64.exp();
        assert!((det2(&k) - expected).abs() < 1e-14);
        assert!((det2(&k) - 0.888_982).abs() < 1e-6);
        let singular = PerturbationOperator::from_row_slice(2, &[-0.5, 0.5, 0.5, -0.5]).unwrap();
        assert!(det2(&singular).abs() < 1e-15);
    }

    #[test]
    fn det2_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in [1, 2, 3, 5] {
            for _ in 0..50 {
                let k = PerturbationOperator::new(DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0))).unwrap();
                let (a, b) = (det2(&k), det2_spectral(&k));
                assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-3), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn polar_examples() {
        let p = polar_decompose(&PerturbationOperator::zero(2)).unwrap();
        assert!(p.kbar.norm() < 1e-15 && p.a.norm() < 1e-15);

        let th = 0.7f64;
        let r = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        let k = PerturbationOperator::new(&r - DMatrix::identity(2, 2)).unwrap();
        let p = polar_decompose(&k).unwrap();
        assert!(p.kbar.norm() < 1e-12);
        assert!((&p.a - (&r - DMatrix::identity(2, 2))).norm() < 1e-12);

        let singular = PerturbationOperator::from_row_slice(1, &[-1.0]).unwrap();
        assert!(matches!(polar_decompose(&singular), Err(Error::NotInvertible { .. })));
    }

    #[test]
    fn polar_matches_svd_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let k = random_operator(&mut rng, 2);
            let p = polar_decompose(&k).unwrap();
            assert!((p.recompose() - k.identity_plus()).norm() < 1e-10);
            assert!(p.isometry_defect() < 1e-10);
            assert!((&p.kbar - p.kbar.transpose()).norm() < 1e-12);
            let (positive, isometry) = svd_polar_oracle(&k);
            assert!((DMatrix::identity(2, 2) + &p.kbar - positive).norm() < 1e-8);
            assert!((DMatrix::identity(2, 2) + &p.a - isometry).norm() < 1e-8);
        }
    }

    #[test]
    fn divergence_examples() {
        let k0 = PerturbationOperator::zero(2);
        assert_eq!(divergence_shift(&k0, &[3.0, -1.0]).unwrap(), DVector::zeros(2));
        let k = PerturbationOperator::from_row_slice(2, &[1.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(divergence_shift(&k, &[1.0, 1.0]).unwrap(), DVector::from_vec(vec![1.0, 2.0]));
        assert!(divergence_shift(&k, &[1.0]).is_err());

        let one = PerturbationOperator::from_row_slice(1, &[1.0]).unwrap();
        assert_eq!(second_divergence(&one, &[0.0]).unwrap(), -1.0);
        let two = PerturbationOperator::from_row_slice(1, &[2.0]).unwrap();
        assert_eq!(second_divergence(&two, &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn shift_of_positive_part_is_potential_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = random_operator(&mut rng, 3);
        let p = polar_decompose(&k).unwrap();
        let kbar = PerturbationOperator::new(p.kbar).unwrap();
        let phi = linear_forward_potential(&k).unwrap();
        for _ in 0..10 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g = phi.gradient(&x);
            assert!((divergence_shift(&kbar, &x).unwrap() - g).norm() < 1e-12);
        }
    }

    #[test]
    fn second_divergence_is_centred() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = random_operator(&mut rng, 2);
        let space = GaussianSpace::standard(2).with_seed(21);
        let mc = expect(|x| second_divergence(&k, x).unwrap(), &space, Method::MonteCarlo).unwrap();
        assert!(mc.within(0.0, 3.0, 0.0), "{mc:?}");
        let quad = expect(|x| second_divergence(&k, x).unwrap(), &space, Method::Quadrature).unwrap();
        assert!(quad.mean.abs() < 1e-12);
    }

    #[test]
    fn lambda_examples() {
        let k0 = PerturbationOperator::zero(2);
        assert!((lambda_k(&k0, &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-15);
        let s = 0.5;
        let k = PerturbationOperator::from_row_slice(1, &[s - 1.0]).unwrap();
        assert!((lambda_k(&k, &[0.0]).unwrap() - 0.5).abs() < 1e-14);
        for x in [-1.0f64, 0.5, 2.0] {
            let closed = s * (-(s - 1.0) * x * x - 0.5 * (s - 1.0f64).powi(2) * x * x).exp();
            assert!((lambda_k(&k, &[x]).unwrap() - closed).abs() < 1e-13);
        }
        let singular = PerturbationOperator::from_row_slice(1, &[-1.0]).unwrap();
        assert!(lambda_k(&singular, &[0.0]).is_err());
    }

    #[test]
    fn lambda_is_inverse_pushforward_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for n in [2, 3] {
            for _ in 0..20 {
                let k = random_operator(&mut rng, n);
                let u = k.identity_plus();
                let v = u.clone().try_inverse().unwrap();
                for _ in 0..5 {
                    let y = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
                    let x = &v * &y;
                    let lam = lambda_k(&k, x.as_slice()).unwrap().abs();
                    let dens = pushforward_density(&k, y.as_slice()).unwrap();
                    assert!((1.0 / lam - dens).abs() <= 1e-8 * dens, "{} vs {}", 1.0 / lam, dens);
                }
            }
        }
    }

    #[test]
    fn potentials_scalar_case() {
        let k = PerturbationOperator::from_row_slice(1, &[-0.5]).unwrap();
        let phi = linear_forward_potential(&k).unwrap();
        for x in [-2.0f64, 0.0, 1.3] {
            assert!((phi.value(&[x]) - (-x * x / 4.0 + 0.25)).abs() < 1e-14);
            assert!((phi.gradient(&[x])[0] + x / 2.0).abs() < 1e-14);
        }
        let zero = PerturbationOperator::zero(2);
        assert!(linear_forward_potential(&zero).unwrap().value(&[1.0, 2.0]).abs() < 1e-15);
        assert!(linear_backward_potential(&zero).unwrap().value(&[1.0, 2.0]).abs() < 1e-15);
    }

    #[test]
    fn potentials_invert_and_are_one_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let k = random_operator(&mut rng, 2);
        let phi = linear_forward_potential(&k).unwrap();
        let psi = linear_backward_potential(&k).unwrap();
        let grid = crate::gaussian::box_grid(2, 2.0, 5);
        assert!(check_one_convex(&phi, &grid).unwrap().holds);
        assert!(check_one_convex(&psi, &grid).unwrap().holds);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
            let t = &x + phi.gradient(x.as_slice());
            let back = &t + psi.gradient(t.as_slice());
            worst = worst.max((back - x).norm());
        }
        assert!(worst < 1e-10, "{worst}");
    }

    #[test]
    fn gaussian_target_examples() {
        let n = gaussian_target_operator(&DMatrix::identity(2, 2)).unwrap();
        assert!(n.matrix().norm() < 1e-15);
        let n = gaussian_target_operator(&DMatrix::from_element(1, 1, 0.25)).unwrap();
        assert!((n.matrix()[(0, 0)] + 0.5).abs() < 1e-15);
        let singular = gaussian_target_operator(&DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        assert!((singular.identity_plus() * singular.identity_plus() - DMatrix::from_element(2, 2, 1.0)).norm() < 1e-12);
        assert!(matches!(
            gaussian_target_operator(&DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 1.0])),
            Err(Error::NotSymmetric { .. })
        ));
        assert!(matches!(
            gaussian_target_operator(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5])),
            Err(Error::Indefinite { .. })
        ));
    }

    #[test]
    fn gaussian_target_pushes_forward_covariance() {
        let sigma = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 1.5]);
        let n = gaussian_target_operator(&sigma).unwrap();
        let u = n.identity_plus();
        let m = 50_000;
        let draws = crate::gaussian::standard_normal_samples(77, m, 2);
        let ys: Vec<DVector<f64>> = draws.chunks(2).map(|x| &u * DVector::from_column_slice(x)).collect();
        for (i, j) in [(0, 0), (0, 1), (1, 1)] {
            let prods: Vec<f64> = ys.iter().map(|y| y[i] * y[j]).collect();
            let est = crate::stats::MeanEstimate::from_samples(&prods);
            assert!(est.within(sigma[(i, j)], 3.0, 0.0), "({i},{j}) {est:?}");
        }
    }
}
