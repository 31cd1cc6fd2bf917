use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::drift::ClarkOconeDrift;
use super::process::{anchor_transport, ols_fit, TransportProcess};
use super::{BrownianEnsemble, CylindricalFunctional, IntegralScheme};
use crate::error::{Error, Result};
use crate::gaussian::{expect, GaussianSpace, Method};
use crate::rng::stream_rng;
use crate::stats::{ks_critical, median, std_normal_cdf, weighted_ks_statistic, MeanEstimate};

fn relative_errors(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (x / y - 1.0).abs()).collect()
}

/// `E_ν[g]` from `μ`-samples weighted by `w`, with a delta-method error.
fn weighted_mean(g: &[f64], w: &[f64]) -> MeanEstimate {
    let total: f64 = w.iter().sum();
    let mean = g.iter().zip(w).map(|(x, v)| x * v).sum::<f64>() / total;
    let var: f64 = g.iter().zip(w).map(|(x, v)| (v * (x - mean)).powi(2)).sum();
    MeanEstimate {
        mean,
        std_error: var.sqrt() / total,
    }
}

#[derive(Debug, Clone)]
pub struct DensityCheckReport {
    /// `exp(-∫u dW - ½∫u² dt)` per path.
    pub reconstructed: Vec<f64>,
    /// `e^{-f}/c` per path.
    pub direct: Vec<f64>,
    pub median_relative_error: f64,
    pub max_relative_error: f64,
    pub mean_reconstructed: MeanEstimate,
}

/// Rebuilds `L` from the drift as a stochastic exponential along each path.
pub fn ito_density_check(
    f: &CylindricalFunctional,
    ensemble: &BrownianEnsemble,
    drift: &ClarkOconeDrift,
    scheme: IntegralScheme,
) -> Result<DensityCheckReport> {
    let grid = ensemble.grid();
    if drift.grid() != grid {
        return Err(Error::InvalidArgument("drift and ensemble use different grids".into()));
    }
    let pairs: Vec<(f64, f64)> = (0..ensemble.len())
        .into_par_iter()
        .map(|p| {
            let w = ensemble.values(p);
            let u = drift.along(&w);
            let rec = (-u.stochastic_integral(&w, grid, scheme) - 0.5 * u.square_integral(grid, scheme)).exp();
            (rec, f.density(&w))
        })
        .collect();
    let (reconstructed, direct): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let errors = relative_errors(&reconstructed, &direct);
    Ok(DensityCheckReport {
        median_relative_error: median(&errors),
        max_relative_error: errors.iter().copied().fold(0.0, f64::max),
        mean_reconstructed: MeanEstimate::from_samples(&reconstructed),
        reconstructed,
        direct,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChangeOfVariablesRow {
    pub name: &'static str,
    /// `E[g∘T · Λ]`.
    pub weighted: MeanEstimate,
    /// `E[g]` under Wiener measure, in closed form.
    pub exact: f64,
    pub passes: bool,
}

#[derive(Debug, Clone)]
pub struct ItoJacobianReport {
    /// `exp(∫ u∘T dB^T - ½∫ (u∘T)² dt)` per path.
    pub lambda_ito: Vec<f64>,
    /// `1/(L∘T)` per path.
    pub lambda_direct: Vec<f64>,
    pub median_relative_error: f64,
    pub max_relative_error: f64,
    pub mean_lambda: MeanEstimate,
    pub change_of_variables: Vec<ChangeOfVariablesRow>,
}

impl ItoJacobianReport {
    pub fn change_of_variables_passes(&self) -> bool {
        self.change_of_variables.iter().all(|r| r.passes)
    }
}

/// `Λ` from the Itô formula along the transported paths. With
/// `B^T = T + ∫ u∘T dt` the exponent is `∫ u∘T dT + ½∫ (u∘T)² dt`.
pub fn ito_jacobian(
    f: &CylindricalFunctional,
    process: &TransportProcess,
    drift: &ClarkOconeDrift,
    scheme: IntegralScheme,
) -> Result<ItoJacobianReport> {
    let grid = process.grid();
    if drift.grid() != grid {
        return Err(Error::InvalidArgument("drift and process use different grids".into()));
    }
    let tp = process.transported();
    let c = f.normalization();
    let pairs: Vec<(f64, f64)> = (0..tp.len())
        .into_par_iter()
        .map(|p| {
            let t = tp.path(p);
            let u = drift.along(t);
            let ito = (u.stochastic_integral(t, grid, scheme) + 0.5 * u.square_integral(grid, scheme)).exp();
            (ito, c * f.value(t).exp())
        })
        .collect();
    let (lambda_ito, lambda_direct): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let errors = relative_errors(&lambda_ito, &lambda_direct);

    let h = grid.nearest_index(0.5);
    let th = grid.time(h);
    let last = grid.steps();
    type TestFn = fn(&[f64], usize, usize) -> f64;
    let tests: [(&'static str, TestFn, f64); 3] = [
        ("cos(w(1))", |x, _, l| x[l].cos(), (-0.5f64).exp()),
        ("cos(2 w(1/2))", |x, h, _| (2.0 * x[h]).cos(), (-2.0 * th).exp()),
        ("cos(w(1) - w(1/2))", |x, h, l| (x[l] - x[h]).cos(), (-0.5 * (1.0 - th)).exp()),
    ];
    let change_of_variables = tests
        .iter()
        .map(|&(name, g, exact)| {
            let xs: Vec<f64> = (0..tp.len()).map(|p| g(tp.path(p), h, last) * lambda_ito[p]).collect();
            let weighted = MeanEstimate::from_samples(&xs);
            ChangeOfVariablesRow {
                name,
                weighted,
                exact,
                passes: weighted.within(exact, 2.0, 0.0),
            }
        })
        .collect();

    Ok(ItoJacobianReport {
        median_relative_error: median(&errors),
        max_relative_error: errors.iter().copied().fold(0.0, f64::max),
        mean_lambda: MeanEstimate::from_samples(&lambda_ito),
        lambda_ito,
        lambda_direct,
        change_of_variables,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreeEnergyReport {
    /// `-log E[e^{-f}]`.
    pub lhs: f64,
    /// `E[f∘T + ½∫ (u∘T)² dt]`.
    pub rhs: MeanEstimate,
    /// The same estimate on every other grid time, from the same paths.
    pub coarse_rhs: Option<f64>,
    /// `|rhs - coarse_rhs|`, the leading discretization error of a first
    /// order scheme.
    pub budget: f64,
    /// `E[f₀(T) - log det₂(DT) + ½|∇φ|²]` over the anchor coordinates by
    /// quadrature, for convex `f`.
    pub static_rhs: Option<f64>,
}

impl FreeEnergyReport {
    pub fn passes(&self) -> bool {
        self.rhs.within(self.lhs, 2.0, self.budget)
    }
}

fn free_energy_samples(
    f: &CylindricalFunctional,
    process: &TransportProcess,
    drift: &ClarkOconeDrift,
    scheme: IntegralScheme,
) -> Vec<f64> {
    let grid = process.grid();
    let tp = process.transported();
    (0..tp.len())
        .into_par_iter()
        .map(|p| {
            let t = tp.path(p);
            f.value(t) + 0.5 * drift.along(t).square_integral(grid, scheme)
        })
        .collect()
}

const STATIC_ORDER: usize = 40;

/// `E[f₀(T(ξ)) - log det₂(DT(ξ)) + ½|T(ξ) - ξ|²]` over whitened anchors.
fn static_free_energy(f: &CylindricalFunctional) -> Result<f64> {
    let solution = anchor_transport(f)?;
    let m = f.whitening();
    let k = f.dim();
    let order = if k == 1 { STATIC_ORDER } else { STATIC_ORDER / 2 };
    let space = GaussianSpace::standard(k).with_quadrature_order(order);
    Ok(expect(
        |xi| {
            let t = solution.forward(xi);
            let y = &m * &t;
            let eig = SymmetricEigen::new(solution.derivative(xi));
            let log_det2: f64 = eig.eigenvalues.iter().map(|mu| mu.ln() - (mu - 1.0)).sum();
            f.core().value(y.as_slice()) - log_det2 + 0.5 * (t - DVector::from_column_slice(xi)).norm_squared()
        },
        &space,
        Method::Quadrature,
    )?
    .mean)
}

pub fn free_energy_identity(
    f: &CylindricalFunctional,
    process: &TransportProcess,
    drift: &ClarkOconeDrift,
    scheme: IntegralScheme,
) -> Result<FreeEnergyReport> {
    if drift.grid() != process.grid() {
        return Err(Error::InvalidArgument("drift and process use different grids".into()));
    }
    let rhs = MeanEstimate::from_samples(&free_energy_samples(f, process, drift, scheme));
    let coarse_rhs = if process.grid().steps().is_multiple_of(2) {
        match (process.coarsen(2), drift.coarsen(2, f)) {
            (Ok(p), Ok(d)) => {
                let s = free_energy_samples(&f.regrid(p.grid())?, &p, &d, scheme);
                Some(s.iter().sum::<f64>() / s.len() as f64)
            }
            _ => None,
        }
    } else {
        None
    };
    let static_rhs = if f.is_convex() { Some(static_free_energy(f)?) } else { None };
    Ok(FreeEnergyReport {
        lhs: -f.normalization().ln(),
        rhs,
        budget: coarse_rhs.map(|c| (rhs.mean - c).abs()).unwrap_or(0.0),
        coarse_rhs,
        static_rhs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationCost {
    /// `E_ν|O - X|²_H`.
    pub cost: MeanEstimate,
    /// `E_ν[|O - X|² - |T∘X - X|²]`, paired.
    pub margin: MeanEstimate,
}

#[derive(Debug, Clone)]
pub struct RotationReport {
    /// Largest weighted KS statistic of the anchor values of `T∘X` under
    /// `ν` against their `ν`-law.
    pub ks_statistic: f64,
    pub ks_critical: f64,
    /// `max |B^T - X∘T|` over paths and times, with `B^T` from regressing
    /// `D_t f∘T` on the filtration of `T`.
    pub max_discrepancy: f64,
    /// Every path stays within five regression standard errors of the
    /// fitted drift, integrated over time.
    pub discrepancy_within_budget: bool,
    /// `E_ν|T∘X - X|²_H`.
    pub transport_cost: MeanEstimate,
    pub alternatives: Vec<RotationCost>,
    /// `O = m - (z - m)` on the anchor and auxiliary coordinates.
    pub reflection: RotationCost,
}

impl RotationReport {
    pub fn law_passes(&self) -> bool {
        self.ks_statistic < self.ks_critical
    }

    pub fn discrepancy_passes(&self) -> bool {
        self.discrepancy_within_budget
    }

    /// No alternative rotation is cheaper beyond two standard errors.
    pub fn minimal(&self) -> bool {
        self.alternatives
            .iter()
            .chain(std::iter::once(&self.reflection))
            .all(|r| r.margin.mean >= -2.0 * r.margin.std_error)
    }

    pub fn reflection_margin_positive(&self) -> bool {
        self.reflection.margin.mean > 2.0 * self.reflection.margin.std_error
    }

    pub fn passes(&self) -> bool {
        self.law_passes() && self.discrepancy_passes() && self.minimal() && self.reflection_margin_positive()
    }
}

pub const ROTATION_SAMPLES: usize = 20;
const DISCREPANCY_SIGMAS: f64 = 5.0;

fn symmetric_power(m: &DMatrix<f64>, p: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let r = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.powf(p))) * eig.eigenvectors.transpose();
    (&r + r.transpose()) * 0.5
}

fn haar_orthogonal(n: usize, seed: u64, index: u64) -> DMatrix<f64> {
    let mut rng = stream_rng(seed, index);
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    let signs = DMatrix::from_diagonal(&r.diagonal().map(|d| if d < 0.0 { -1.0 } else { 1.0 }));
    q * signs
}

/// Checks that `T∘X` is a `ν`-rotation: its anchor law under `ν`, the
/// identity `B^T = X∘T`, and minimality of `E_ν|T∘X - X|²` against
/// sampled `ν`-preserving linear maps. These act on the whitened anchors
/// and one auxiliary coordinate `η` orthogonal to them, a Haar function on
/// the first anchor interval, and are the identity elsewhere.
pub fn rotation_check(
    f: &CylindricalFunctional,
    process: &TransportProcess,
    drift: &ClarkOconeDrift,
    scheme: IntegralScheme,
    alpha: f64,
    seed: u64,
) -> Result<RotationReport> {
    let (a, b) = f
        .quadratic_form()
        .ok_or_else(|| Error::Unsupported("rotation check needs a Gaussian target".into()))?;
    let grid = process.grid();
    if drift.grid() != grid {
        return Err(Error::InvalidArgument("drift and process use different grids".into()));
    }
    let k = f.dim();
    let first = f.anchors()[0];
    if first < 2 {
        return Err(Error::InvalidArgument("first anchor interval needs an interior grid time".into()));
    }
    let h = (1..first)
        .min_by(|&x, &y| (grid.time(x) - 0.5 * grid.time(first)).abs().total_cmp(&(grid.time(y) - 0.5 * grid.time(first)).abs()))
        .expect("interior time");
    let (t1, th) = (grid.time(first), grid.time(h));
    let (ca, cb) = (((t1 - th) / (th * t1)).sqrt(), (th / ((t1 - th) * t1)).sqrt());

    // ν on the whitened anchors is N(m, Σ).
    let mw = f.whitening();
    let cov = (DMatrix::identity(k, k) + mw.transpose() * a * &mw)
        .try_inverse()
        .ok_or_else(|| Error::NotIntegrable("I + MᵀAM is singular".into()))?;
    let cov = (&cov + cov.transpose()) * 0.5;
    let mean = -(&cov * (mw.transpose() * b));
    let solution = process.solution();
    let wp = process.brownian();
    let tp = process.transported();
    let m = wp.len();

    struct Sample {
        weight: f64,
        z: DVector<f64>,
        c: DVector<f64>,
        remainder: f64,
        transport_cost: f64,
        anchors_tx: Vec<f64>,
    }
    let samples: Vec<Sample> = (0..m)
        .into_par_iter()
        .map(|p| {
            let w = wp.path(p);
            let u = drift.along(w);
            let big_u = u.cumulative(grid, scheme);
            let total_sq = u.square_integral(grid, scheme);
            let xi = f.whitened(w);
            let mut z = DVector::zeros(k + 1);
            let mut c = DVector::zeros(k + 1);
            let mut prev = (0usize, 0.0);
            for j in 0..k {
                let (i, t) = (f.anchors()[j], f.anchor_times()[j]);
                z[j] = xi[j];
                c[j] = (big_u[i] - big_u[prev.0]) / (t - prev.1).sqrt();
                prev = (i, t);
            }
            z[k] = ca * w[h] - cb * (w[first] - w[h]);
            c[k] = ca * big_u[h] - cb * (big_u[first] - big_u[h]);
            let xi_x: Vec<f64> = (0..k).map(|j| xi[j] + c[j]).collect();
            let txi = solution.forward(&xi_x);
            let transport_cost = (&txi - DVector::from_column_slice(&xi_x)).norm_squared();
            let anchors_tx: Vec<f64> = (&mw * &txi).iter().copied().collect();
            Sample {
                weight: f.density(w),
                remainder: (total_sq - c.norm_squared()).max(0.0),
                z,
                c,
                transport_cost,
                anchors_tx,
            }
        })
        .collect();
    let weights: Vec<f64> = samples.iter().map(|s| s.weight).collect();

    // (a) anchor law of T∘X under ν.
    let y_cov = &mw * &cov * mw.transpose();
    let y_mean = &mw * &mean;
    let mut ks_statistic: f64 = 0.0;
    let mut ks_crit = f64::INFINITY;
    for j in 0..k {
        let xs: Vec<f64> = samples.iter().map(|s| s.anchors_tx[j]).collect();
        let (mu, sd) = (y_mean[j], y_cov[(j, j)].sqrt());
        let (stat, n_eff) = weighted_ks_statistic(&xs, &weights, |x| std_normal_cdf((x - mu) / sd));
        ks_statistic = ks_statistic.max(stat);
        ks_crit = ks_crit.min(ks_critical(n_eff, alpha / k as f64));
    }

    // (b) B^T by regression on the filtration of T against X∘T.
    let steps = grid.steps();
    let grads: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|p| f.core().gradient(&f.anchor_values(tp.path(p))).iter().copied().collect())
        .collect();
    let features = |path: &[f64], i: usize| -> Vec<f64> {
        if i == 0 {
            return vec![1.0];
        }
        let mut x = vec![1.0, path[i]];
        x.extend(f.anchors().iter().filter(|&&a| a < i).map(|&a| path[a]));
        x
    };
    let fits = (0..steps)
        .into_par_iter()
        .map(|i| {
            let relevant: Vec<usize> = (0..k).filter(|&j| f.anchors()[j] > i).collect();
            let rows: Vec<(Vec<f64>, f64)> = (0..m)
                .map(|p| (features(tp.path(p), i), relevant.iter().map(|&j| grads[p][j]).sum()))
                .collect();
            if relevant.is_empty() {
                return Ok(None);
            }
            ols_fit(&rows)
                .map(|(coef, cov, _)| Some((coef, cov)))
                .ok_or_else(|| Error::Degenerate(format!("rank-deficient regression at step {i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let per_path: Vec<(f64, f64)> = (0..m)
        .into_par_iter()
        .map(|p| {
            let path = tp.path(p);
            let u = drift.along(path);
            let (mut diff, mut budget, mut worst): (f64, f64, f64) = (0.0, 0.0, 0.0);
            for i in 0..steps {
                if let Some((coef, cov)) = &fits[i] {
                    let x = DVector::from_vec(features(path, i));
                    let fitted = coef.dot(&x);
                    diff += (fitted - u.start[i]) * grid.dt(i);
                    budget += DISCREPANCY_SIGMAS * x.dot(&(cov * &x)).max(0.0).sqrt() * grid.dt(i);
                }
                worst = worst.max(diff.abs());
            }
            (worst, budget)
        })
        .collect();
    let max_discrepancy = per_path.iter().map(|x| x.0).fold(0.0, f64::max);
    let discrepancy_within_budget = per_path.iter().all(|&(w, b)| w <= b + 1e-12);

    // (c) costs of alternative ν-preserving maps O(z) = m + D^{½}QD^{-½}(z - m).
    let mut d = DMatrix::identity(k + 1, k + 1);
    d.view_mut((0, 0), (k, k)).copy_from(&cov);
    let (d_half, d_inv_half) = (symmetric_power(&d, 0.5), symmetric_power(&d, -0.5));
    let mut mz = DVector::zeros(k + 1);
    mz.rows_mut(0, k).copy_from(&mean);
    let transport: Vec<f64> = samples.iter().map(|s| s.transport_cost).collect();
    let cost_of = |q: &DMatrix<f64>| -> RotationCost {
        let r = &d_half * q * &d_inv_half;
        let costs: Vec<f64> = samples
            .iter()
            .map(|s| {
                let moved = &mz + &r * (&s.z - &mz);
                (moved - &s.z - &s.c).norm_squared() + s.remainder
            })
            .collect();
        let diffs: Vec<f64> = costs.iter().zip(&transport).map(|(x, y)| x - y).collect();
        RotationCost {
            cost: weighted_mean(&costs, &weights),
            margin: weighted_mean(&diffs, &weights),
        }
    };
    let alternatives = (0..ROTATION_SAMPLES as u64).map(|i| cost_of(&haar_orthogonal(k + 1, seed, i))).collect();
    let reflection = cost_of(&(-DMatrix::identity(k + 1, k + 1)));

    Ok(RotationReport {
        ks_statistic,
        ks_critical: ks_crit,
        max_discrepancy,
        discrepancy_within_budget,
        transport_cost: weighted_mean(&transport, &weights),
        alternatives,
        reflection,
    })
}
