use super::*;
use crate::gaussian::box_grid;
use crate::stats::std_normal_cdf;
use crate::transport::solve_gaussian;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scale_solution(s: f64) -> TransportSolution {
    solve_gaussian(&DMatrix::from_element(1, 1, s * s)).unwrap()
}

fn line(lo: f64, hi: f64, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| vec![lo + (hi - lo) * i as f64 / (n - 1) as f64]).collect()
}

fn quad(dim: usize, order: usize) -> GaussianSpace {
    GaussianSpace::standard(dim).with_quadrature_order(order)
}

fn potential_only(phi: ScalarField) -> TransportSolution {
    let dim = phi.dim();
    TransportSolution::from_potentials(phi, ScalarField::zero(dim), 0.0, SolverKind::GaussianClosedForm)
}

#[test]
fn ou_operator_examples() {
    let half = ScalarField::quadratic(DMatrix::from_element(1, 1, 1.0), DVector::zeros(1), 0.0);
    assert!((ou_operator(&half, &[2.0]) - 3.0).abs() < 1e-14);
    let h = DVector::from_vec(vec![0.3, -1.2]);
    let lin = ScalarField::linear(h.clone());
    assert!((ou_operator(&lin, &[0.7, 2.0]) - (0.21 - 2.4)).abs() < 1e-14);
}

#[test]
fn ou_operator_integrates_by_parts() {
    let phi = ScalarField::finite_difference(2, |x| x[0].sin() + 0.3 * x[0] * x[1] * x[1] + (0.5 * x[1]).cos());
    let diff = |x: &[f64]| ou_operator(&phi, x) * phi.value(x) - phi.gradient(x).norm_squared();
    let q = expect(diff, &quad(2, 30), Method::Quadrature).unwrap();
    assert!(q.mean.abs() < 1e-6, "{q:?}");
    let space = GaussianSpace::standard(2).with_mc_samples(100_000).with_seed(4);
    let mc = expect(diff, &space, Method::MonteCarlo).unwrap();
    assert!(mc.mean.abs() < 3.0 * mc.std_error, "{mc:?}");
}

#[test]
fn jacobian_examples() {
    assert_eq!(jacobian(&ScalarField::zero(2), &[0.4, -1.0]).unwrap(), 1.0);
    let s: f64 = 0.5;
    let phi = scale_solution(s).phi;
    let closed = |x: f64| s * (x * x * (1.0 - s * s) / 2.0).exp();
    assert!((jacobian(&phi, &[0.0]).unwrap() - 0.5).abs() < 1e-14);
    assert!((jacobian(&phi, &[1.0]).unwrap() - 0.727500).abs() < 1e-5);
    for x in [-3.0, -0.4, 2.2] {
        assert!((jacobian(&phi, &[x]).unwrap() / closed(x) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn jacobian_rejects_non_monotone_maps() {
    let phi = ScalarField::quadratic(DMatrix::from_element(1, 1, -1.2), DVector::zeros(1), 0.0);
    match jacobian(&phi, &[0.3]) {
        Err(Error::NotMonotone { eigenvalue, .. }) => assert!((eigenvalue + 1.2).abs() < 1e-12),
        other => panic!("{other:?}"),
    }
}

#[test]
fn residual_of_exact_and_numerical_solutions() {
    let id = potential_only(ScalarField::zero(1));
    assert_eq!(ma_residual(&id, &DensitySpec::uniform(1), &line(-3.0, 3.0, 21)).unwrap(), 0.0);

    let l = DensitySpec::gaussian_scale(0.5).unwrap();
    assert!(ma_residual(&scale_solution(0.5), &l, &line(-4.0, 4.0, 41)).unwrap() < 1e-10);
    let cdf = solve_1d(&l, &Cdf1dOptions::default()).unwrap();
    assert!(ma_residual(&cdf, &l, &line(-4.0, 4.0, 41)).unwrap() < 1e-8);
}

#[test]
fn residual_of_grid_solution() {
    let sigma = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]);
    let l = DensitySpec::gaussian_covariance(&sigma).unwrap();
    let grid = GridSpec::standard(2).unwrap();
    let sol = solve_grid_entropic(&l, &grid, &EntropicOptions::for_grid(&grid)).unwrap();
    let r = ma_residual(&sol, &l, &box_grid(2, 1.5, 7)).unwrap();
    assert!(r < 5e-2, "{r}");
}

#[test]
fn residual_requires_log_concavity() {
    let l = DensitySpec::gaussian_scale(2.0).unwrap();
    assert!(ma_residual(&scale_solution(2.0), &l, &line(-1.0, 1.0, 5)).is_err());
}

#[test]
fn subsolution_examples() {
    let l = DensitySpec::gaussian_scale(0.5).unwrap();
    let pts = line(-3.0, 3.0, 31);
    let exact = subsolution_check(&scale_solution(0.5), &l, &pts, 1e-8).unwrap();
    assert!(exact.holds && (exact.min_product - 1.0).abs() < 1e-10);

    // Halving the potential keeps it 1-convex but the product is no longer 1;
    // closed form 1.5 exp(-5x²/8).
    let halved = potential_only(scale_solution(0.5).phi.affine(0.5, 0.0));
    let r = subsolution_check(&halved, &l, &pts, 1e-8).unwrap();
    assert!((r.max_product - 1.5).abs() < 1e-10);
    assert!(!r.holds);
    let products = ma_products(&halved, &l, &[vec![2.0]]).unwrap();
    assert!((products[0] - 1.5 * (-2.5f64).exp()).abs() < 1e-12 && products[0] < 1.0);

    // φ = -x²/4 with L ≡ 1: Λ = ½ exp(3x²/8), which exceeds 1 for large |x|
    // although it integrates to 1.
    let quarter = ScalarField::quadratic(DMatrix::from_element(1, 1, -0.5), DVector::zeros(1), 0.0);
    let sol = potential_only(quarter.clone());
    let r = subsolution_check(&sol, &DensitySpec::uniform(1), &line(-1.0, 1.0, 21), 1e-12).unwrap();
    assert!(r.holds && (r.min_product - 0.5).abs() < 1e-14);
    assert!(jacobian(&quarter, &[2.0]).unwrap() > 1.0);
    // The line rule stops at |x| = 12, which cuts P(|N(0, 4)| > 12) off the mass.
    let mass = expect(|x| jacobian(&quarter, x).unwrap(), &quad(1, 80), Method::AdaptiveLine).unwrap();
    assert!((mass.mean - 1.0).abs() < 1e-8, "{mass:?}");
}

#[test]
fn regularity_examples() {
    let u = regularity_bound(&potential_only(ScalarField::zero(1)), &DensitySpec::uniform(1), &quad(1, 40), Method::Quadrature).unwrap();
    assert_eq!((u.lhs.mean, u.rhs.mean), (0.0, 0.0));

    let r = regularity_bound(&scale_solution(0.5), &DensitySpec::gaussian_scale(0.5).unwrap(), &quad(1, 60), Method::Quadrature).unwrap();
    assert!((r.lhs.mean - 0.5).abs() < 1e-12);
    assert!((r.rhs.mean - 0.636294).abs() < 1e-6);
    assert!(r.holds(2.0));

    let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 0.25]));
    let sol = solve_gaussian(&sigma).unwrap();
    let r = regularity_bound(&sol, &DensitySpec::gaussian_covariance(&sigma).unwrap(), &quad(2, 40), Method::Quadrature).unwrap();
    assert!((r.lhs.mean - 1.0).abs() < 1e-12);
    assert!((r.rhs.mean - 1.272589).abs() < 1e-6);
    assert!(r.holds(2.0));
}

#[test]
fn regularity_monte_carlo_reports_errors() {
    let l = DensitySpec::gaussian_scale(0.5).unwrap();
    let space = GaussianSpace::standard(1).with_mc_samples(20_000).with_seed(2);
    let r = regularity_bound(&scale_solution(0.5), &l, &space, Method::MonteCarlo).unwrap();
    assert!(r.lhs.std_error > 0.0 && r.rhs.std_error > 0.0);
    assert!(r.holds(2.0));
}

#[test]
fn distance_examples() {
    let u = distance_identity(&potential_only(ScalarField::zero(1)), &DensitySpec::uniform(1), &quad(1, 20), Method::Quadrature).unwrap();
    assert_eq!((u.half_d2.mean, u.entropy_plus_logdet()), (0.0, 0.0));

    let l = DensitySpec::gaussian_scale(0.5).unwrap();
    let d = distance_identity(&scale_solution(0.5), &l, &quad(1, 60), Method::Quadrature).unwrap();
    assert!((d.half_d2.mean - 0.125).abs() < 1e-12);
    assert!((d.entropy.mean - 0.318147).abs() < 1e-6);
    assert!((d.log_det2.mean + 0.193147).abs() < 1e-6);
    assert!(d.agrees(2.0, 1e-10));
    assert!(d.talagrand_holds(0.0));

    let shift = DensitySpec::gaussian_shift(1.0).unwrap();
    let sol = solve_1d(&shift, &Cdf1dOptions::default()).unwrap();
    let d = distance_identity(&sol, &shift, &quad(1, 60), Method::Quadrature).unwrap();
    assert!((d.half_d2.mean - 0.5).abs() < 1e-8);
    assert!((d.entropy.mean - 0.5).abs() < 1e-8);
    assert!(d.log_det2.mean.abs() < 1e-8);
}

#[test]
fn talagrand_on_cdf_instances() {
    for l in [
        DensitySpec::gaussian_scale(0.25).unwrap(),
        DensitySpec::gaussian_scale(0.9).unwrap(),
        DensitySpec::gaussian_shift(0.5).unwrap(),
        DensitySpec::box_indicator(&[(-1.0, 2.0)]).unwrap(),
    ] {
        let sol = solve_1d(&l, &Cdf1dOptions::default()).unwrap();
        let d = distance_identity(&sol, &l, &quad(1, 60), Method::AdaptiveLine).unwrap();
        assert!(d.talagrand_holds(1e-9), "{d:?}");
        assert!(d.agrees(0.0, 1e-6), "{d:?}");
    }
}

#[test]
fn convex_set_examples() {
    let cdf = SetSolver::Cdf(Cdf1dOptions::default());
    let pts = line(-2.5, 2.5, 50);
    let space = quad(1, 60);

    let whole = convex_set_mass(&[(f64::NEG_INFINITY, f64::INFINITY)], &cdf, &pts, &space).unwrap();
    assert!((whole.mu_direct - 1.0).abs() < 1e-15);
    assert!((whole.lambda_constant - 1.0).abs() < 1e-9 && (whole.formula_value - 1.0).abs() < 1e-9);

    let r = convex_set_mass(&[(-1.0, 1.0)], &cdf, &pts, &space).unwrap();
    let oracle = 2.0 * std_normal_cdf(1.0) - 1.0;
    assert!((r.mu_direct - oracle).abs() < 1e-14 && (oracle - 0.682689).abs() < 1e-6);
    assert!(r.lambda_spread < 1e-3, "{}", r.lambda_spread);
    assert!((r.lambda_constant - oracle).abs() < 1e-3);
    assert!((r.formula_value - oracle).abs() < 1e-3, "{}", r.formula_value);

    let half = convex_set_mass(&[(0.0, f64::INFINITY)], &cdf, &pts, &space).unwrap();
    assert!((half.lambda_constant - 0.5).abs() < 1e-6 && (half.formula_value - 0.5).abs() < 1e-6);
}

#[test]
fn convex_set_in_two_dimensions() {
    let bounds = [(-1.0, 1.0), (-0.5, f64::INFINITY)];
    let oracle = (2.0 * std_normal_cdf(1.0) - 1.0) * std_normal_cdf(0.5);
    let pts = box_grid(2, 2.0, 6);
    let r = convex_set_mass(&bounds, &SetSolver::Cdf(Cdf1dOptions::default()), &pts, &quad(2, 40)).unwrap();
    assert!((r.lambda_constant - oracle).abs() < 1e-6 && r.lambda_spread < 1e-6);
    assert!((r.formula_value - oracle).abs() < 1e-3, "{} {oracle}", r.formula_value);

    let grid = GridSpec::standard(2).unwrap();
    let g = convex_set_mass(&bounds, &SetSolver::Grid(grid), &box_grid(2, 0.4, 3), &quad(2, 20)).unwrap();
    assert!((g.lambda_constant - oracle).abs() < 0.1, "{}", g.lambda_constant);
}

#[test]
fn convex_set_rejects_tiny_sets() {
    let cdf = SetSolver::Cdf(Cdf1dOptions::default());
    assert!(matches!(
        convex_set_mass(&[(4.0, f64::INFINITY)], &cdf, &line(-1.0, 1.0, 3), &quad(1, 20)),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn caffarelli_examples() {
    let pts = line(-3.0, 3.0, 13);
    let r = caffarelli_check(&scale_solution(0.5), &DensitySpec::gaussian_scale(0.5).unwrap(), &pts, 1e-8).unwrap();
    assert!(r.holds && r.applicable && (r.min_eigenvalue + 0.5).abs() < 1e-12);

    let id = caffarelli_check(&potential_only(ScalarField::zero(1)), &DensitySpec::uniform(1), &pts, 1e-8).unwrap();
    assert!(id.holds && id.max_eigenvalue == 0.0);

    let wide = DensitySpec::gaussian_scale(2.0).unwrap();
    let sol = solve_1d(&wide, &Cdf1dOptions::default()).unwrap();
    let r = caffarelli_check(&sol, &wide, &pts, 1e-6).unwrap();
    assert!(!r.holds && !r.applicable);
    assert!((r.max_eigenvalue - 1.0).abs() < 1e-6, "{r:?}");
}

#[test]
fn interpolation_examples() {
    let l = DensitySpec::gaussian_scale(0.5).unwrap();
    let pts = line(-4.0, 4.0, 81);
    let rows = interpolation_bound(&scale_solution(0.5), &l, &[0.0, 0.5, 1.0], &pts).unwrap();
    assert!((rows[0].max_density - 1.0).abs() < 1e-14 && rows[0].bound >= 1.0);
    assert!((rows[1].max_density - 1.0 / 0.75).abs() < 1e-12);
    assert!(rows.iter().all(|r| r.holds(1e-12)));

    // f = log(1 + e^x) is convex and nonnegative.
    let f = ScalarField::new(
        1,
        |x| x[0].exp().ln_1p(),
        |x| DVector::from_element(1, 1.0 / (1.0 + (-x[0]).exp())),
        |x| {
            let s = 1.0 / (1.0 + (-x[0]).exp());
            DMatrix::from_element(1, 1, s * (1.0 - s))
        },
    );
    let mut soft = DensitySpec::from_exponent(f, &quad(1, 60), Method::AdaptiveLine, true).unwrap();
    soft.alpha_lower_bound = Some(0.0);
    let sol = solve_1d(&soft, &Cdf1dOptions::default()).unwrap();
    let ts: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let rows = interpolation_bound(&sol, &soft, &ts, &line(-5.0, 5.0, 101)).unwrap();
    assert!(rows.iter().all(|r| r.holds(1e-8)), "{rows:?}");
    let last = rows.last().unwrap();
    assert!(last.max_density > 1.0 && last.max_density < last.bound);
}

#[test]
fn interpolation_needs_alpha_and_injectivity() {
    let wide = DensitySpec::gaussian_scale(2.0).unwrap();
    assert!(matches!(
        interpolation_bound(&scale_solution(2.0), &wide, &[0.5], &line(-1.0, 1.0, 3)),
        Err(Error::Unsupported(_))
    ));
    let folded = potential_only(ScalarField::quadratic(DMatrix::from_element(1, 1, -1.6), DVector::zeros(1), 0.0));
    let l = DensitySpec::uniform(1);
    assert!(interpolation_bound(&folded, &l, &[0.5], &line(-1.0, 1.0, 3)).is_ok());
    assert!(matches!(
        interpolation_bound(&folded, &l, &[1.0], &line(-1.0, 1.0, 3)),
        Err(Error::NotMonotone { .. })
    ));
}

#[test]
fn jacobian_report_collects_identities() {
    let l = DensitySpec::gaussian_scale(0.5).unwrap();
    let r = jacobian_report(&scale_solution(0.5), &l, &line(-2.0, 2.0, 9), &quad(1, 60), Method::Quadrature).unwrap();
    assert_eq!(r.lambda_values.len(), 9);
    assert!(r.max_residual() < 1e-10);
    assert!(r.det2_log_mean <= 0.0);
    assert!((r.cost_half - (r.entropy + r.det2_log_mean)).abs() < 1e-10);
}

fn random_symmetric_above_minus_identity(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let q = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)).qr().q();
    let d = DVector::from_fn(n, |_, _| rng.random_range(-0.999..3.0));
    &q * DMatrix::from_diagonal(&d) * q.transpose()
}

#[test]
fn minus_log_det2_is_midpoint_convex() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let neg_log_det2 = |a: &DMatrix<f64>, t: f64| {
        -crate::linear::det2(&crate::linear::PerturbationOperator::new(a * t).unwrap()).ln()
    };
    for _ in 0..100 {
        let n = rng.random_range(1..5);
        let a = random_symmetric_above_minus_identity(&mut rng, n);
        let (s, t) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let mid = neg_log_det2(&a, 0.5 * (s + t));
        assert!(mid <= 0.5 * (neg_log_det2(&a, s) + neg_log_det2(&a, t)) + 1e-12);
    }
}

proptest! {
    #[test]
    fn log_scalar_calculus_bound(a in -0.99f64..=0.0, x in -3.0f64..3.0) {
        // m(t) = -log Λ(tφ)(x) for φ = ½ a x²; derivatives by differences on a t-grid.
        let m = |t: f64| {
            let phi = ScalarField::quadratic(DMatrix::from_element(1, 1, t * a), DVector::zeros(1), 0.0);
            -jacobian(&phi, &[x]).unwrap().ln()
        };
        let h = 1e-3;
        let d1 = (-3.0 * m(0.0) + 4.0 * m(h) - m(2.0 * h)) / (2.0 * h);
        let d2 = (m(0.0) - 2.0 * m(h) + m(2.0 * h)) / (h * h);
        prop_assert!(m(1.0) >= d1 + 0.5 * d2 - 1e-4 * (1.0 + x * x));
    }

    #[test]
    fn log_det2_nonpositive_for_admissible_hessians(d in proptest::collection::vec(-0.999f64..5.0, 1..5), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = d.len();
        let q = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let h = &q * DMatrix::from_diagonal(&DVector::from_vec(d)) * q.transpose();
        let phi = ScalarField::quadratic(h, DVector::zeros(n), 0.0);
        let x = vec![0.1; n];
        prop_assert!(log_det2(&phi, &x).unwrap() <= 1e-12);
    }

    #[test]
    fn jacobian_matches_change_of_variables(a in -0.9f64..2.0, b in -0.5f64..0.5, x in -2.0f64..2.0) {
        let phi = ScalarField::quadratic(DMatrix::from_element(1, 1, a), DVector::from_element(1, b), 0.0);
        let t = x + a * x + b;
        let oracle = (1.0 + a) * (-(t * t - x * x) / 2.0).exp();
        prop_assert!((jacobian(&phi, &[x]).unwrap() / oracle - 1.0).abs() < 1e-10);
    }
}
