//! Acceptance criteria, run in sequence so the runtime limits are measured
//! on an otherwise idle process. Prints one line per criterion and exits
//! nonzero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ampere::gaussian::{interval_mass, standard_normal_samples};
use ampere::ito::{
    free_energy_identity, ito_jacobian, semimartingale_decomposition_check, simulate_paths, transport_process,
    ClarkOconeDrift, CylindricalFunctional, DecompositionOptions, DriftSource, IntegralScheme, TimeGrid,
};
use ampere::linear::{lambda_k, PerturbationOperator};
use ampere::monge_ampere::{
    caffarelli_check, convex_set_mass, distance_identity, ma_residual, regularity_bound, SetSolver,
};
use ampere::stats::{std_normal_cdf, std_normal_quantile_upper, MeanEstimate};
use ampere::transport::{
    approximation_ladder, polar_factorize_discrete, polar_factorize_linear, solve_1d, solve_gaussian,
    solve_grid_entropic, Cdf1dOptions, EntropicOptions, GridSpec, LadderOptions,
};
use ampere::{DensitySpec, GaussianSpace, Method, Result, ScalarField, TransportSolution};
use itertools::Itertools;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn line(lo: f64, hi: f64, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| vec![lo + (hi - lo) * i as f64 / (n - 1) as f64]).collect()
}

fn quad(dim: usize, order: usize) -> GaussianSpace {
    GaussianSpace::standard(dim).with_quadrature_order(order)
}

/// Gaussian with variance `s²` relative to `N(0, 1)`: `E_ν log L` and
/// `log det₂` of the map `x ↦ s x`.
fn scale_oracle(s: f64) -> (f64, f64) {
    (-s.ln() + 0.5 * (s * s - 1.0), s.ln() - (s - 1.0))
}

fn monge_ampere_identity() -> Result<Outcome> {
    let start = Instant::now();
    let mut family = vec![];
    for s in [0.25, 0.5, 0.9] {
        family.push((format!("s={s}"), DensitySpec::gaussian_scale(s)?));
    }
    for m in [0.5, 1.0] {
        family.push((format!("m={m}"), DensitySpec::gaussian_shift(m)?));
    }
    let pts = line(-4.0, 4.0, 81);
    let mut worst: f64 = 0.0;
    let mut parts = vec![];
    for (name, l) in &family {
        let sol = solve_1d(l, &Cdf1dOptions::default())?;
        let r = ma_residual(&sol, l, &pts)?;
        worst = worst.max(r);
        parts.push(format!("{name}:{r:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-8 && secs < 5.0,
        format!("max residual {worst:.2e} < 1e-8 [{}], {secs:.2} s < 5 s", parts.join(" ")),
    )
}

fn exact_distance() -> Result<Outcome> {
    let (entropy, log_det) = scale_oracle(0.5);
    let l = DensitySpec::gaussian_scale(0.5)?;
    let sol = solve_1d(&l, &Cdf1dOptions::default())?;
    let d = distance_identity(&sol, &l, &quad(1, 60), Method::AdaptiveLine)?;
    let sum = d.entropy_plus_logdet();
    let pass = (d.half_d2.mean - 0.125).abs() < 1e-3
        && (sum - 0.125).abs() < 1e-3
        && (d.entropy.mean - entropy).abs() < 1e-3
        && (d.log_det2.mean - log_det).abs() < 1e-3;
    outcome(
        pass,
        format!(
            "½d² {:.6}, E[L log L] {:.6} (oracle {entropy:.6}), E[log det₂] {:.6} (oracle {log_det:.6}), sum {sum:.6}",
            d.half_d2.mean, d.entropy.mean, d.log_det2.mean
        ),
    )
}

struct Instance {
    name: &'static str,
    density: DensitySpec,
    solution: TransportSolution,
    space: GaussianSpace,
    method: Method,
}

fn battery() -> Result<Vec<Instance>> {
    let cdf = Cdf1dOptions::default();
    let mut out = vec![];
    let one_d: Vec<(&'static str, DensitySpec)> = vec![
        ("scale 0.25", DensitySpec::gaussian_scale(0.25)?),
        ("scale 0.5", DensitySpec::gaussian_scale(0.5)?),
        ("scale 0.9", DensitySpec::gaussian_scale(0.9)?),
        ("shift 0.5", DensitySpec::gaussian_shift(0.5)?),
        ("shift 1", DensitySpec::gaussian_shift(1.0)?),
        ("box [-1,2]", DensitySpec::box_indicator(&[(-1.0, 2.0)])?),
    ];
    for (name, density) in one_d {
        out.push(Instance {
            name,
            solution: solve_1d(&density, &cdf)?,
            density,
            space: quad(1, 60),
            method: Method::AdaptiveLine,
        });
    }
    let sigma = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]);
    let gaussian = DensitySpec::gaussian_covariance(&sigma)?;
    out.push(Instance {
        name: "2D gaussian",
        solution: solve_gaussian(&sigma)?,
        density: gaussian.clone(),
        space: quad(2, 40),
        method: Method::Quadrature,
    });
    let grid = GridSpec::standard(2)?;
    out.push(Instance {
        name: "2D gaussian grid",
        solution: solve_grid_entropic(&gaussian, &grid, &EntropicOptions::for_grid(&grid))?,
        density: gaussian,
        space: quad(2, 20),
        method: Method::Quadrature,
    });
    let exponent = ScalarField::finite_difference(2, |x| 0.25 * (x[0] * x[0] + x[1] * x[1]) + 0.2 * x[0] * x[1] + 0.05 * x[0].powi(4));
    let quartic = DensitySpec::from_exponent(exponent, &quad(2, 40), Method::Quadrature, true)?;
    out.push(Instance {
        name: "2D quartic grid",
        solution: solve_grid_entropic(&quartic, &grid, &EntropicOptions::for_grid(&grid))?,
        density: quartic,
        space: quad(2, 20),
        method: Method::Quadrature,
    });
    Ok(out)
}

fn talagrand(instances: &[Instance]) -> Result<Outcome> {
    let mut violations = vec![];
    for i in instances {
        let d = distance_identity(&i.solution, &i.density, &i.space, i.method)?;
        if !d.talagrand_holds(1e-9) {
            violations.push(format!("{} (log det₂ {:.3e}, ½d² {:.4}, ent {:.4})", i.name, d.log_det2.mean, d.half_d2.mean, d.entropy.mean));
        }
    }
    outcome(
        violations.is_empty(),
        format!("{} instances, violations: {}", instances.len(), if violations.is_empty() { "none".into() } else { violations.join(", ") }),
    )
}

const SOLVER_TOL: f64 = 1e-8;

fn sobolev(instances: &[Instance]) -> Result<Outcome> {
    let mut violations = vec![];
    let mut tightest = f64::INFINITY;
    for i in instances {
        let r = regularity_bound(&i.solution, &i.density, &i.space, i.method)?;
        tightest = tightest.min(r.rhs.mean - r.lhs.mean);
        // Two standard errors plus the deterministic solver tolerance; the
        // shift instances attain equality.
        let se = r.lhs.std_error.hypot(r.rhs.std_error);
        if r.lhs.mean > r.rhs.mean + 2.0 * se + SOLVER_TOL {
            violations.push(format!("{} ({:.4} > {:.4})", i.name, r.lhs.mean, r.rhs.mean));
        }
    }
    outcome(
        violations.is_empty(),
        format!(
            "{} instances, smallest slack {tightest:.4}, violations: {}",
            instances.len(),
            if violations.is_empty() { "none".into() } else { violations.join(", ") }
        ),
    )
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn polar_factorization() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut discrete_failures = 0;
    for _ in 0..50 {
        let atoms: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let images: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let p = polar_factorize_discrete(&atoms, &images)?;
        let brute = (0..6)
            .permutations(6)
            .map(|perm| (0..6).map(|i| sq(&images[i], &atoms[perm[i]])).sum::<f64>() / 6.0)
            .fold(f64::INFINITY, f64::min);
        let recomposes = p.recomposed() == (0..6).collect::<Vec<_>>();
        if !recomposes || p.rotation_distance > brute + 1e-12 {
            discrete_failures += 1;
        }
    }
    let (mut recomposition, mut isometry) = (0.0f64, 0.0f64);
    let mut tested = 0;
    while tested < 200 {
        let k: DMatrix<f64> = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-0.8..0.8));
        if (DMatrix::identity(2, 2) + &k).determinant().abs() < 0.05 {
            continue;
        }
        let p = polar_factorize_linear(&PerturbationOperator::new(k)?)?;
        recomposition = recomposition.max(p.recomposition_error);
        isometry = isometry.max(p.isometry_defect);
        tested += 1;
    }
    outcome(
        discrete_failures == 0 && recomposition < 1e-10 && isometry < 1e-10,
        format!(
            "discrete: {discrete_failures}/50 off the 720-permutation minimum; linear (200 K): recomposition {recomposition:.1e}, A+Aᵀ+AᵀA {isometry:.1e}"
        ),
    )
}

fn lambda_k_identity() -> Result<Outcome> {
    let start = Instant::now();
    let m = 100_000;
    let x = standard_normal_samples(61, m, 2);
    let tests: [(&str, fn(f64, f64) -> f64, f64); 3] = [
        ("cos x₁", |a, _| a.cos(), (-0.5f64).exp()),
        ("cos(x₁+x₂)", |a, b| (a + b).cos(), (-1.0f64).exp()),
        ("exp(-|x|²/2)", |a, b| (-0.5 * (a * a + b * b)).exp(), 0.5),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let (mut worst_z, mut failures, mut total) = (0.0f64, 0, 0);
    for _ in 0..20 {
        let k = PerturbationOperator::new(DMatrix::from_fn(2, 2, |_, _| rng.random_range(-0.4..0.4)))?;
        let u = k.identity_plus();
        let lambdas = x
            .chunks(2)
            .map(|p| lambda_k(&k, p).map(f64::abs))
            .collect::<Result<Vec<f64>>>()?;
        for (_, g, exact) in &tests {
            let w: Vec<f64> = x
                .chunks(2)
                .zip(&lambdas)
                .map(|(p, lam)| {
                    let y0 = u[(0, 0)] * p[0] + u[(0, 1)] * p[1];
                    let y1 = u[(1, 0)] * p[0] + u[(1, 1)] * p[1];
                    g(y0, y1) * lam
                })
                .collect();
            let est = MeanEstimate::from_samples(&w);
            let z = (est.mean - exact).abs() / est.std_error;
            worst_z = worst_z.max(z);
            total += 1;
            if z > 2.0 {
                failures += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures == 0 && secs < 30.0,
        format!("{failures}/{total} outside 2 SE (largest |z| {worst_z:.2}), {secs:.2} s < 30 s"),
    )
}

fn convex_set() -> Result<Outcome> {
    let oracle = 2.0 * std_normal_cdf(1.0) - 1.0;
    let r = convex_set_mass(&[(-1.0, 1.0)], &SetSolver::Cdf(Cdf1dOptions::default()), &line(-2.5, 2.5, 50), &quad(1, 60))?;
    let pass = (r.mu_direct - 0.682689).abs() < 1e-6
        && (interval_mass(-1.0, 1.0) - oracle).abs() < 1e-14
        && r.lambda_spread < 1e-3
        && (r.lambda_constant - r.mu_direct).abs() < 1e-3;
    outcome(
        pass,
        format!(
            "μ(A) {:.6}, Λ mean {:.6}, spread {:.1e} over 50 points",
            r.mu_direct, r.lambda_constant, r.lambda_spread
        ),
    )
}

fn ito_jacobian_criterion() -> Result<Outcome> {
    let start = Instant::now();
    let fine = TimeGrid::uniform(1024)?;
    let e_fine = simulate_paths(10_000, &fine, 80)?;
    let e_coarse = e_fine.coarsen(2)?;
    let mut medians = vec![];
    for e in [&e_coarse, &e_fine] {
        let f = CylindricalFunctional::squared_endpoint(e.grid(), 1.0)?;
        let process = transport_process(&f, e)?;
        let drift = ClarkOconeDrift::closed_form(&f, e.grid())?;
        let r = ito_jacobian(&f, &process, &drift, IntegralScheme::default())?;
        medians.push(r.median_relative_error);
    }
    let ratio = medians[1] / medians[0];
    let secs = start.elapsed().as_secs_f64();
    outcome(
        medians[0] < 0.03 && (0.35..=0.65).contains(&ratio) && secs < 60.0,
        format!(
            "median rel. error {:.2e} at K=512 (< 3%), {:.2e} at K=1024, ratio {ratio:.3} in [0.35, 0.65], {secs:.2} s < 60 s",
            medians[0], medians[1]
        ),
    )
}

struct ItoSetup {
    f: CylindricalFunctional,
    process: ampere::ito::TransportProcess,
    drift: ClarkOconeDrift,
}

fn ito_setup() -> Result<ItoSetup> {
    let grid = TimeGrid::uniform(512)?;
    let e = simulate_paths(10_000, &grid, 90)?;
    let f = CylindricalFunctional::squared_endpoint(&grid, 1.0)?;
    Ok(ItoSetup {
        process: transport_process(&f, &e)?,
        drift: ClarkOconeDrift::closed_form(&f, &grid)?,
        f,
    })
}

fn decomposition(s: &ItoSetup) -> Result<Outcome> {
    let r = semimartingale_decomposition_check(&s.process, &s.f, DriftSource::Regression, &DecompositionOptions::default())?;
    let worst = r
        .cells
        .iter()
        .map(|c| (c.estimate - c.oracle).abs() / c.std_error)
        .fold(0.0f64, f64::max);
    let failing = r.cells.iter().filter(|c| !c.passes).count();
    let familywise = std_normal_quantile_upper(0.025 / r.cells.len() as f64);
    let qv = r.total_quadratic_variation();
    outcome(
        r.drift_passes() && r.qv_passes(),
        format!(
            "{failing}/{} cells outside 2 SE (largest |z| {worst:.2}; family-wise 5% level for {} cells is |z| ≤ {:.2}); [B]₁ = {:.4} in 1 ± {:.4}",
            r.cells.len(),
            r.cells.len(),
            familywise,
            qv.value.mean,
            qv.band
        ),
    )
}

fn free_energy(s: &ItoSetup) -> Result<Outcome> {
    let r = free_energy_identity(&s.f, &s.process, &s.drift, IntegralScheme::default())?;
    let lhs_oracle = 0.5 * 2f64.ln();
    outcome(
        (r.lhs - lhs_oracle).abs() < 1e-9 && r.passes(),
        format!(
            "lhs {:.6} (½ log 2 = {lhs_oracle:.6}), rhs {:.6} ± {:.4} (2 SE {:.4} + budget {:.1e})",
            r.lhs,
            r.rhs.mean,
            (r.rhs.mean - r.lhs).abs(),
            2.0 * r.rhs.std_error,
            r.budget
        ),
    )
}

fn ladder() -> Result<Outcome> {
    let sigma = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.25, 0.5]));
    let l = DensitySpec::gaussian_covariance(&sigma)?;
    let reference = solve_gaussian(&sigma)?;
    let r = approximation_ladder(&l, &reference, &[1, 2], &LadderOptions::default())?;
    let rungs: Vec<String> = r
        .rungs
        .iter()
        .map(|g| format!("k={}: ‖∇φ_k-∇φ‖ {:.4}, E[L_k log L_k] {:.4}", g.k, g.gradient_error.mean, g.entropy))
        .collect();
    outcome(
        r.errors_nonincreasing(2.0) && r.entropy_below_full(0.0),
        format!("{}; E[L log L] {:.4}", rungs.join("; "), r.entropy),
    )
}

fn negative_controls(s: &ItoSetup) -> Result<Outcome> {
    let wide = DensitySpec::gaussian_scale(2.0)?;
    let sol = solve_1d(&wide, &Cdf1dOptions::default())?;
    let c = caffarelli_check(&sol, &wide, &line(-3.0, 3.0, 13), 1e-6)?;
    let r = semimartingale_decomposition_check(&s.process, &s.f, DriftSource::FutureInformation, &DecompositionOptions::default())?;
    let worst = r.adaptedness.iter().map(|a| (a.coefficient / a.std_error).abs()).fold(0.0f64, f64::max);
    outcome(
        !c.holds && !r.passes(),
        format!(
            "s=2 Caffarelli {} (max eigenvalue {:.3}); future-information decomposition {} (adaptedness |z| up to {worst:.1})",
            if c.holds { "holds" } else { "fails" },
            c.max_eigenvalue,
            if r.passes() { "passes" } else { "fails" }
        ),
    )
}

fn report(n: usize, name: &str, run: impl FnOnce() -> Result<Outcome>) -> bool {
    let start = Instant::now();
    let (pass, detail) = match run() {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let t: Duration = start.elapsed();
    println!(
        "criterion {n:>2} {:<4} {name}: {detail} [{:.2} s]",
        if pass { "PASS" } else { "FAIL" },
        t.as_secs_f64()
    );
    pass
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= report(1, "Monge-Ampère identity", monge_ampere_identity);
    ok &= report(2, "exact distance formula", exact_distance);
    let instances = battery();
    match &instances {
        Ok(b) => {
            ok &= report(3, "Talagrand defect", || talagrand(b));
            ok &= report(4, "Sobolev bound", || sobolev(b));
        }
        Err(e) => {
            let msg = format!("{e}");
            ok &= report(3, "Talagrand defect", || Err(ampere::Error::InvalidArgument(msg.clone())));
            ok &= report(4, "Sobolev bound", || Err(ampere::Error::InvalidArgument(msg.clone())));
        }
    }
    ok &= report(5, "polar factorization", polar_factorization);
    ok &= report(6, "Λ_K density identity", lambda_k_identity);
    ok &= report(7, "convex-set mass", convex_set);
    ok &= report(8, "Itô Jacobian", ito_jacobian_criterion);
    match ito_setup() {
        Ok(s) => {
            ok &= report(9, "semimartingale decomposition", || decomposition(&s));
            ok &= report(10, "free-energy identity", || free_energy(&s));
            ok &= report(11, "approximation ladder", ladder);
            ok &= report(12, "negative controls", || negative_controls(&s));
        }
        Err(e) => {
            println!("ito setup failed: {e}");
            ok = false;
        }
    }
    if ok {
        println!("all acceptance criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("some acceptance criteria fail");
        ExitCode::FAILURE
    }
}
