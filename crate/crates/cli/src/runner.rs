use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ampere::gaussian::{box_grid, standard_normal_samples};
use ampere::ito::{
    clark_ocone_drift, free_energy_identity, ito_density_check, ito_jacobian, rotation_check,
    semimartingale_decomposition_check, simulate_paths, transport_process, BrownianEnsemble, ClarkOconeDrift,
    CylindricalFunctional, DecompositionOptions, DriftEstimator, DriftSource, IntegralScheme, TimeGrid,
    TransportProcess,
};
use ampere::linear::{det2, det2_spectral, lambda_k, polar_decompose, PerturbationOperator};
use ampere::monge_ampere::{
    caffarelli_check, convex_set_mass, distance_identity, ma_residual, regularity_bound, SetSolver,
};
use ampere::rng::stream_rng;
use ampere::stats::MeanEstimate;
use ampere::transport::{
    approximation_ladder, polar_factorize_discrete, polar_factorize_linear, solve_1d, solve_gaussian,
    solve_grid_entropic, Cdf1dOptions, EntropicOptions, GridSpec, LadderOptions,
};
use ampere::{DensitySpec, Error, GaussianSpace, Method, TransportSolution};
use itertools::Itertools;
use rand::Rng;

use crate::report::{Expected, ReportRecord, Status};
use crate::scenario::{Kind, Scenario};

/// Outcome of one check before it becomes a record.
pub struct Measured {
    pub observed: f64,
    pub expected: Expected,
    pub tolerance: f64,
    pub std_error: Option<f64>,
    pub message: String,
    /// Conditions beyond the main comparison; a failing one fails the check.
    pub also: Vec<(bool, String)>,
}

impl Measured {
    fn new(observed: f64, expected: Expected, tolerance: f64) -> Self {
        Self {
            observed,
            expected,
            tolerance,
            std_error: None,
            message: String::new(),
            also: Vec::new(),
        }
    }

    fn se(mut self, se: f64) -> Self {
        self.std_error = Some(se);
        self
    }

    fn note(mut self, message: String) -> Self {
        self.message = message;
        self
    }

    fn requires(mut self, ok: bool, what: String) -> Self {
        self.also.push((ok, what));
        self
    }
}

type CheckResult = Result<Measured, String>;

fn err(e: Error) -> String {
    e.to_string()
}

fn line(lo: f64, hi: f64, n: usize) -> Vec<Vec<f64>> {
    if n == 1 {
        return vec![vec![0.5 * (lo + hi)]];
    }
    (0..n).map(|i| vec![lo + (hi - lo) * i as f64 / (n - 1) as f64]).collect()
}

fn quad(dim: usize, order: usize) -> GaussianSpace {
    GaussianSpace::standard(dim).with_quadrature_order(order)
}

/// A solved finite-dimensional transport problem and how to integrate
/// against `μ` for it.
struct Solved {
    density: DensitySpec,
    solution: TransportSolution,
    points: Vec<Vec<f64>>,
    space: GaussianSpace,
    method: Method,
}

fn ma_check(s: &Solved, tol: f64) -> CheckResult {
    let r = ma_residual(&s.solution, &s.density, &s.points).map_err(err)?;
    Ok(Measured::new(r, Expected::Equal(0.0), tol).note(format!("max |Λ·L∘T - 1| over {} points", s.points.len())))
}

fn distance_check(s: &Solved, tol: f64) -> CheckResult {
    let d = distance_identity(&s.solution, &s.density, &s.space, s.method).map_err(err)?;
    let se = (d.half_d2.std_error.powi(2) + d.entropy.std_error.powi(2) + d.log_det2.std_error.powi(2)).sqrt();
    Ok(Measured::new(d.half_d2.mean, Expected::Equal(d.entropy_plus_logdet()), tol + 2.0 * se)
        .se(se)
        .note(format!(
            "½d² vs E[L log L] + E[log det₂] = {:.6} + {:.6}",
            d.entropy.mean, d.log_det2.mean
        )))
}

fn talagrand_check(s: &Solved, tol: f64) -> CheckResult {
    let d = distance_identity(&s.solution, &s.density, &s.space, s.method).map_err(err)?;
    let defect = d.log_det2.mean.max(d.half_d2.mean - d.entropy.mean);
    Ok(Measured::new(defect, Expected::AtMost(0.0), tol).note(format!(
        "max(E[log det₂], ½d² - E[L log L]) with E[log det₂] = {:.6}",
        d.log_det2.mean
    )))
}

fn sobolev_check(s: &Solved, tol: f64) -> CheckResult {
    let r = regularity_bound(&s.solution, &s.density, &s.space, s.method).map_err(err)?;
    let se = r.lhs.std_error.hypot(r.rhs.std_error);
    Ok(Measured::new(r.lhs.mean, Expected::AtMost(r.rhs.mean), tol + 2.0 * se)
        .se(se)
        .note("E[|∇φ|² + ‖∇²φ‖²] vs 2 E[L log L]".into()))
}

fn caffarelli(s: &Solved, tol: f64) -> CheckResult {
    let c = caffarelli_check(&s.solution, &s.density, &s.points, tol).map_err(err)?;
    let violation = c.max_eigenvalue.max(-1.0 - c.min_eigenvalue);
    let mut msg = format!("Hessian eigenvalues in [{:.6}, {:.6}]", c.min_eigenvalue, c.max_eigenvalue);
    if !c.applicable {
        msg.push_str("; target not declared H-log-concave");
    }
    Ok(Measured::new(violation, Expected::AtMost(0.0), tol).note(msg))
}

struct Ctx<'a> {
    scenario: &'a Scenario,
}

impl Ctx<'_> {
    fn tol(&self, check: &str, default: f64) -> f64 {
        self.scenario.tolerance(check, default)
    }
}

fn transport_1d(sc: &Scenario) -> Result<Solved, String> {
    let density = if let Some(s) = sc.number("s") {
        DensitySpec::gaussian_scale(s)
    } else if let Some(m) = sc.number("m") {
        DensitySpec::gaussian_shift(m)
    } else {
        let (a, b) = sc.pair("interval").expect("validated target");
        DensitySpec::box_indicator(&[(a, b)])
    }
    .map_err(err)?;
    let solution = solve_1d(&density, &Cdf1dOptions::default()).map_err(err)?;
    let r = sc.number("radius").unwrap_or(4.0);
    Ok(Solved {
        density,
        solution,
        points: line(-r, r, sc.count("points", 81)),
        space: quad(1, 60),
        method: Method::AdaptiveLine,
    })
}

fn gaussian_space(n: usize) -> GaussianSpace {
    quad(n, [60, 60, 40, 16, 10][n.min(4)])
}

fn transport_gaussian(sc: &Scenario) -> Result<Solved, String> {
    let sigma = sc.matrix("covariance").expect("validated");
    let n = sigma.nrows();
    Ok(Solved {
        density: DensitySpec::gaussian_covariance(sigma).map_err(err)?,
        solution: solve_gaussian(sigma).map_err(err)?,
        points: box_grid(n, 1.5, if n <= 2 { 5 } else { 3 }),
        space: gaussian_space(n),
        method: Method::Quadrature,
    })
}

fn grid_spec(sc: &Scenario) -> Result<GridSpec, String> {
    GridSpec::new(2, sc.number("grid_radius").unwrap_or(4.0), sc.count("grid_points", 41)).map_err(err)
}

fn transport_grid(sc: &Scenario) -> Result<Solved, String> {
    let sigma = sc.matrix("covariance").expect("validated");
    let density = DensitySpec::gaussian_covariance(sigma).map_err(err)?;
    let grid = grid_spec(sc)?;
    let solution = solve_grid_entropic(&density, &grid, &EntropicOptions::for_grid(&grid)).map_err(err)?;
    Ok(Solved {
        density,
        solution,
        points: box_grid(2, 1.5, 7),
        space: quad(2, 20),
        method: Method::Quadrature,
    })
}

/// Runs one named check of a finite-dimensional transport scenario.
fn transport_check(ctx: &Ctx, solved: &Result<Solved, String>, check: &str) -> CheckResult {
    let sc = ctx.scenario;
    let grid = sc.kind == Kind::TransportGrid;
    if check == "ladder" {
        let sigma = sc.matrix("covariance").expect("validated");
        let l = DensitySpec::gaussian_covariance(sigma).map_err(err)?;
        let reference = solve_gaussian(sigma).map_err(err)?;
        let options = LadderOptions {
            grid_radius: sc.number("grid_radius").unwrap_or(4.0),
            grid_points: sc.count("grid_points", 41),
            ..LadderOptions::default()
        };
        let r = approximation_ladder(&l, &reference, &[1, 2], &options).map_err(err)?;
        let (a, b) = (&r.rungs[0].gradient_error, &r.rungs[1].gradient_error);
        let se = a.std_error.hypot(b.std_error);
        let tol = ctx.tol(check, 0.0);
        return Ok(Measured::new(b.mean, Expected::AtMost(a.mean), tol + 2.0 * se)
            .se(se)
            .note(format!(
                "‖∇φ₂ - ∇φ‖ vs ‖∇φ₁ - ∇φ‖; E[L_k log L_k] = {:.6}, {:.6}; E[L log L] = {:.6}",
                r.rungs[0].entropy, r.rungs[1].entropy, r.entropy
            ))
            .requires(r.entropy_below_full(tol), "E[L_k log L_k] <= E[L log L]".into()));
    }
    let s = solved.as_ref().map_err(Clone::clone)?;
    match check {
        "ma_residual" => ma_check(s, ctx.tol(check, if grid { 5e-2 } else if sc.kind == Kind::Transport1d { 1e-8 } else { 1e-10 })),
        "distance_identity" => distance_check(s, ctx.tol(check, if grid { 1e-2 } else { 1e-6 })),
        "talagrand" => talagrand_check(s, ctx.tol(check, 1e-9)),
        "sobolev" => sobolev_check(s, ctx.tol(check, 1e-8)),
        "caffarelli" => caffarelli(s, ctx.tol(check, 1e-6)),
        "convex_set_mass" => {
            let (a, b) = sc.pair("set").expect("validated");
            let tol = ctx.tol(check, 1e-3);
            let r = convex_set_mass(&[(a, b)], &SetSolver::Cdf(Cdf1dOptions::default()), &line(-2.5, 2.5, 50), &quad(1, 60))
                .map_err(err)?;
            Ok(Measured::new(r.lambda_constant, Expected::Equal(r.mu_direct), tol)
                .note(format!("Λ on 50 points vs μ([{a}, {b}]); formula value {:.6}", r.formula_value))
                .requires(r.lambda_spread < tol, format!("spread of Λ {:.3e} below tolerance", r.lambda_spread)))
        }
        other => Err(format!("check '{other}' does not apply to {}", sc.kind)),
    }
}

fn linear_check(ctx: &Ctx, op: &Result<PerturbationOperator, String>, check: &str) -> CheckResult {
    let k = op.as_ref().map_err(Clone::clone)?;
    match check {
        "det2" => {
            let spectral = det2_spectral(k);
            let tol = ctx.tol(check, 1e-10) * spectral.abs().max(1.0);
            Ok(Measured::new(det2(k), Expected::Equal(spectral), tol).note("LU route vs spectral route".into()))
        }
        "polar" => {
            let p = polar_factorize_linear(k).map_err(err)?;
            let defect = p.recomposition_error.max(p.isometry_defect);
            Ok(Measured::new(defect, Expected::Equal(0.0), ctx.tol(check, 1e-10)).note(format!(
                "max of ‖(I+K̄)(I+A) - (I+K)‖ = {:.3e} and ‖A+Aᵀ+AᵀA‖ = {:.3e}",
                p.recomposition_error, p.isometry_defect
            )))
        }
        "lambda_identity" => {
            let n = k.dim();
            let samples = ctx.scenario.count("samples", 100_000);
            let x = standard_normal_samples(ctx.scenario.seed, samples, n);
            let u = k.identity_plus();
            let values = x
                .chunks(n)
                .map(|p| {
                    let y = &u * nalgebra::DVector::from_column_slice(p);
                    lambda_k(k, p).map(|lam| y[0].cos() * lam.abs())
                })
                .collect::<Result<Vec<f64>, Error>>()
                .map_err(err)?;
            let est = MeanEstimate::from_samples(&values);
            let tol = ctx.tol(check, 0.0) + 2.0 * est.std_error;
            Ok(Measured::new(est.mean, Expected::Equal((-0.5f64).exp()), tol)
                .se(est.std_error)
                .note(format!("E[cos((I+K)x)₁ |Λ_K(x)|] over {samples} samples")))
        }
        other => Err(format!("check '{other}' does not apply to linear_operator")),
    }
}

fn squared(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn polar_discrete_check(ctx: &Ctx, check: &str) -> CheckResult {
    let sc = ctx.scenario;
    let (m, d, instances) = (sc.count("atoms", 6), sc.count("dimension", 2), sc.count("instances", 1));
    let mut worst_gap = f64::NEG_INFINITY;
    let mut broken = 0;
    for i in 0..instances {
        let mut rng = stream_rng(sc.seed, i as u64);
        let mut cloud = |scale: f64| -> Vec<Vec<f64>> {
            (0..m).map(|_| (0..d).map(|_| rng.random_range(-scale..scale)).collect()).collect()
        };
        let atoms = cloud(1.0);
        let images = cloud(2.0);
        let p = polar_factorize_discrete(&atoms, &images).map_err(err)?;
        if check == "polar_minimal" {
            let brute = (0..m)
                .permutations(m)
                .map(|perm| (0..m).map(|j| squared(&images[j], &atoms[perm[j]])).sum::<f64>() / m as f64)
                .fold(f64::INFINITY, f64::min);
            worst_gap = worst_gap.max(p.rotation_distance - brute);
        } else if p.recomposed() != (0..m).collect::<Vec<_>>() {
            broken += 1;
        }
    }
    match check {
        "polar_minimal" => Ok(Measured::new(worst_gap, Expected::AtMost(0.0), ctx.tol(check, 1e-12))
            .note(format!("rotation cost minus brute-force minimum over {instances} instances"))),
        "recomposition" => Ok(Measured::new(broken as f64, Expected::Equal(0.0), ctx.tol(check, 0.0))
            .note(format!("instances where T∘R differs from U, of {instances}"))),
        other => Err(format!("check '{other}' does not apply to polar_discrete")),
    }
}

struct ItoState {
    f: CylindricalFunctional,
    ensemble: BrownianEnsemble,
    process: TransportProcess,
    drift: ClarkOconeDrift,
}

fn ito_state(sc: &Scenario) -> Result<ItoState, String> {
    let grid = TimeGrid::uniform(sc.count("steps", 512)).map_err(err)?;
    let ensemble = simulate_paths(sc.count("paths", 10_000), &grid, sc.seed).map_err(err)?;
    let f = CylindricalFunctional::squared_endpoint(&grid, sc.number("lambda").expect("validated")).map_err(err)?;
    let process = transport_process(&f, &ensemble).map_err(err)?;
    let drift = match sc.text("estimator").unwrap_or("closed_form") {
        "kernel" => clark_ocone_drift(
            &f,
            &ensemble,
            DriftEstimator::KernelRegression {
                bandwidth: sc.number("bandwidth").expect("validated"),
            },
        ),
        _ => clark_ocone_drift(&f, &ensemble, DriftEstimator::ClosedFormGaussian),
    }
    .map_err(err)?;
    Ok(ItoState {
        f,
        ensemble,
        process,
        drift,
    })
}

fn ito_check(ctx: &Ctx, state: &Result<ItoState, String>, check: &str) -> CheckResult {
    let s = state.as_ref().map_err(Clone::clone)?;
    let scheme = IntegralScheme::default();
    let options = DecompositionOptions::default();
    match check {
        "drift" => {
            let r = ito_density_check(&s.f, &s.ensemble, &s.drift, scheme).map_err(err)?;
            let tol = ctx.tol(check, 0.0) + 2.0 * r.mean_reconstructed.std_error;
            Ok(Measured::new(r.mean_reconstructed.mean, Expected::Equal(1.0), tol)
                .se(r.mean_reconstructed.std_error)
                .note(format!(
                    "E[exp(-∫u dW - ½∫u² dt)]; median relative error against L {:.3e}",
                    r.median_relative_error
                )))
        }
        "decomposition" => {
            let r = semimartingale_decomposition_check(&s.process, &s.f, DriftSource::Regression, &options).map_err(err)?;
            let worst = r
                .cells
                .iter()
                .map(|c| (c.estimate - c.oracle).abs() / c.std_error)
                .fold(0.0, f64::max);
            Ok(Measured::new(worst, Expected::AtMost(options.drift_sigmas), ctx.tol(check, 0.0)).note(format!(
                "largest |z| of regression drift against the closed form over {} cells",
                r.cells.len()
            )))
        }
        "quadratic_variation" => {
            let r = semimartingale_decomposition_check(&s.process, &s.f, DriftSource::Regression, &options).map_err(err)?;
            let qv = r.total_quadratic_variation();
            Ok(Measured::new(qv.value.mean, Expected::Equal(1.0), ctx.tol(check, 0.0) + qv.band)
                .note("[B]₁ of the martingale part".into()))
        }
        "ito_jacobian" => {
            let r = ito_jacobian(&s.f, &s.process, &s.drift, scheme).map_err(err)?;
            Ok(Measured::new(r.median_relative_error, Expected::Equal(0.0), ctx.tol(check, 0.03))
                .note(format!("median relative error, max {:.3e}", r.max_relative_error)))
        }
        "free_energy" => {
            let r = free_energy_identity(&s.f, &s.process, &s.drift, scheme).map_err(err)?;
            let tol = ctx.tol(check, 0.0) + 2.0 * r.rhs.std_error + r.budget;
            Ok(Measured::new(r.rhs.mean, Expected::Equal(r.lhs), tol)
                .se(r.rhs.std_error)
                .note(format!(
                    "E[f∘T + ½∫(u∘T)² dt] vs -log E[e^(-f)]; discretization budget {:.3e}",
                    r.budget
                )))
        }
        "future_information_control" => {
            let r = semimartingale_decomposition_check(&s.process, &s.f, DriftSource::FutureInformation, &options)
                .map_err(err)?;
            let worst = r
                .adaptedness
                .iter()
                .map(|a| (a.coefficient / a.std_error).abs())
                .fold(0.0, f64::max);
            Ok(Measured::new(worst, Expected::AtLeast(options.adaptedness_sigmas), ctx.tol(check, 0.0))
                .note("largest adaptedness |z| of B built from a drift that sees T₁; must be rejected".into())
                .requires(!r.passes(), "decomposition check rejects the corrupted drift".into()))
        }
        "rotation" => {
            let r = rotation_check(&s.f, &s.process, &s.drift, scheme, 0.01, ctx.scenario.seed).map_err(err)?;
            Ok(Measured::new(r.ks_statistic, Expected::AtMost(r.ks_critical), ctx.tol(check, 0.0))
                .note("weighted KS statistic of T∘X against the target anchor law".into())
                .requires(r.discrepancy_passes(), "B^T matches X∘T within budget".into())
                .requires(r.minimal(), "no sampled rotation is cheaper".into()))
        }
        other => Err(format!("check '{other}' does not apply to ito")),
    }
}

fn record(sc: &Scenario, check: &str, outcome: CheckResult, seconds: f64) -> ReportRecord {
    let base = ReportRecord {
        scenario: sc.name.clone(),
        check: check.to_string(),
        status: Status::Fail,
        observed: None,
        expected: None,
        tolerance: None,
        std_error: None,
        message: String::new(),
        wall_time: Some(seconds),
    };
    match outcome {
        Err(message) => ReportRecord { message, ..base },
        Ok(m) => {
            let mut ok = m.observed.is_finite() && m.expected.holds(m.observed, m.tolerance);
            let mut message = m.message;
            for (holds, what) in m.also {
                if !holds {
                    ok = false;
                    message = format!("{message}; failed: {what}");
                }
            }
            ReportRecord {
                status: if ok { Status::Pass } else { Status::Fail },
                observed: Some(m.observed),
                expected: Some(m.expected),
                tolerance: Some(m.tolerance),
                std_error: m.std_error,
                message,
                ..base
            }
        }
    }
}

/// Runs `f` and turns a panic into an error message.
fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let text = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "unknown panic".into());
        Err(format!("internal error: {text}"))
    })
}

/// Executes every requested check in order. Errors become fail records;
/// a failing check never stops the ones after it.
pub fn run(scenario: &Scenario) -> Vec<ReportRecord> {
    let ctx = Ctx { scenario };
    let needs_setup = !scenario.checks.is_empty();
    let mut records = Vec::with_capacity(scenario.checks.len());
    let mut timed = |check: &str, f: &mut dyn FnMut() -> CheckResult| {
        let start = Instant::now();
        let outcome = guarded(f);
        records.push(record(scenario, check, outcome, start.elapsed().as_secs_f64()));
    };
    match scenario.kind {
        Kind::Transport1d | Kind::TransportGaussian | Kind::TransportGrid => {
            let needs_solution = scenario.checks.iter().any(|c| c != "ladder");
            let solved = if needs_setup && needs_solution {
                guarded(|| match scenario.kind {
                    Kind::Transport1d => transport_1d(scenario),
                    Kind::TransportGaussian => transport_gaussian(scenario),
                    _ => transport_grid(scenario),
                })
            } else {
                Err("not solved".into())
            };
            for c in &scenario.checks {
                timed(c, &mut || transport_check(&ctx, &solved, c));
            }
        }
        Kind::LinearOperator => {
            let op = guarded(|| {
                let k = PerturbationOperator::new(scenario.matrix("k").expect("validated").clone()).map_err(err)?;
                polar_decompose(&k).map_err(err)?;
                Ok(k)
            });
            for c in &scenario.checks {
                timed(c, &mut || linear_check(&ctx, &op, c));
            }
        }
        Kind::PolarDiscrete => {
            for c in &scenario.checks {
                timed(c, &mut || polar_discrete_check(&ctx, c));
            }
        }
        Kind::Ito => {
            let state = if needs_setup { guarded(|| ito_state(scenario)) } else { Err("not set up".into()) };
            for c in &scenario.checks {
                timed(c, &mut || ito_check(&ctx, &state, c));
            }
        }
    }
    records
}

/// Replaces the seed of a scenario, for `--seed-override`.
pub fn with_seed(scenario: &Scenario, seed: Option<u64>) -> Scenario {
    let mut s = scenario.clone();
    if let Some(seed) = seed {
        s.seed = seed;
    }
    s
}
