use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use super::drift::ClarkOconeDrift;
use super::{BrownianEnsemble, CylindricalFunctional, PathSet, TimeGrid};
use crate::error::{Error, Result};
use crate::gaussian::ScalarField;
use crate::stats::MeanEstimate;
use crate::transport::{
    solve_1d, solve_gaussian, solve_grid_entropic, Cdf1dOptions, EntropicOptions, GridSpec, SolverKind,
    TransportSolution, VectorMap,
};

/// `T(ξ) = m + Sξ` with `S` symmetric positive definite.
fn affine_solution(mean: DVector<f64>, root: DMatrix<f64>) -> Result<TransportSolution> {
    let n = mean.len();
    let root_inv = root
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("singular transport matrix".into()))?;
    let root_inv = (&root_inv + root_inv.transpose()) * 0.5;
    let id = DMatrix::identity(n, n);
    let phi = ScalarField::quadratic(&root - &id, mean.clone(), 0.0);
    let c0 = 0.5 * mean.dot(&(&root_inv * &mean));
    let psi = ScalarField::quadratic(&root_inv - &id, -(&root_inv * &mean), c0);
    let cost = mean.norm_squared() + (&root - &id).norm_squared();
    let (m, r) = (mean, root_inv);
    let inverse: VectorMap = Arc::new(move |y| &r * (DVector::from_column_slice(y) - &m));
    Ok(TransportSolution::new(phi, psi, inverse, cost, SolverKind::GaussianClosedForm))
}

/// Optimal map on the whitened anchor coordinates: closed form for a
/// quadratic core, the CDF solver for one anchor, the grid solver for two.
pub fn anchor_transport(f: &CylindricalFunctional) -> Result<TransportSolution> {
    let k = f.dim();
    if let Some((a, b)) = f.quadratic_form() {
        let m = f.whitening();
        let precision = DMatrix::identity(k, k) + m.transpose() * a * &m;
        let cov = precision
            .try_inverse()
            .ok_or_else(|| Error::NotIntegrable("I + MᵀAM is singular".into()))?;
        let cov = (&cov + cov.transpose()) * 0.5;
        let mean = -(&cov * (m.transpose() * b));
        if mean.amax() == 0.0 {
            return solve_gaussian(&cov);
        }
        let eig = SymmetricEigen::new(cov);
        if eig.eigenvalues.min() <= 0.0 {
            return Err(Error::Indefinite { eigenvalue: eig.eigenvalues.min() });
        }
        let root = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * eig.eigenvectors.transpose();
        return affine_solution(mean, (&root + root.transpose()) * 0.5);
    }
    let density = f.whitened_density()?;
    match k {
        1 => solve_1d(&density, &Cdf1dOptions::default()),
        2 => {
            let grid = GridSpec::new(2, 4.0, 41)?;
            solve_grid_entropic(&density, &grid, &EntropicOptions::for_grid(&grid))
        }
        _ => Err(Error::Unsupported(format!("no transport solver for {k} anchors"))),
    }
}

/// `T_t = W_t + ∫₀ᵗ D_τφ dτ` on every path, with `φ` acting on the
/// whitened anchor coordinates and the identity elsewhere.
#[derive(Debug, Clone)]
pub struct TransportProcess {
    w: PathSet,
    t: PathSet,
    /// `∇φ(ξ)` per path.
    displacement: Vec<Vec<f64>>,
    solution: TransportSolution,
}

impl TransportProcess {
    pub fn grid(&self) -> &TimeGrid {
        self.w.grid()
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn brownian(&self) -> &PathSet {
        &self.w
    }

    pub fn transported(&self) -> &PathSet {
        &self.t
    }

    pub fn displacement(&self, p: usize) -> &[f64] {
        &self.displacement[p]
    }

    pub fn solution(&self) -> &TransportSolution {
        &self.solution
    }

    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        Ok(Self {
            w: self.w.coarsen(factor)?,
            t: self.t.coarsen(factor)?,
            displacement: self.displacement.clone(),
            solution: self.solution.clone(),
        })
    }
}

/// Adds the Cameron-Martin path with density `Σ_j g_j 1_{(t_{j-1}, t_j]} / √Δ_j`.
pub(crate) fn shift_path(f: &CylindricalFunctional, grid: &TimeGrid, path: &[f64], g: &[f64]) -> Vec<f64> {
    let times = f.anchor_times();
    path.iter()
        .enumerate()
        .map(|(i, &w)| {
            let t = grid.time(i);
            let mut shift = 0.0;
            let mut prev = 0.0;
            for (j, &tj) in times.iter().enumerate() {
                let width = tj - prev;
                shift += g[j] * (t - prev).clamp(0.0, width) / width.sqrt();
                prev = tj;
            }
            w + shift
        })
        .collect()
}

pub fn transport_process(f: &CylindricalFunctional, ensemble: &BrownianEnsemble) -> Result<TransportProcess> {
    if f.dim() > 2 {
        return Err(Error::Unsupported(format!("transport process needs at most 2 anchors, got {}", f.dim())));
    }
    if f.anchors().iter().any(|&i| i > ensemble.grid().steps()) {
        return Err(Error::InvalidArgument("anchor outside the ensemble grid".into()));
    }
    let solution = anchor_transport(f)?;
    let grid = ensemble.grid().clone();
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..ensemble.len())
        .into_par_iter()
        .map(|p| {
            let w = ensemble.values(p);
            let g = solution.phi.gradient(&f.whitened(&w));
            let g: Vec<f64> = g.iter().copied().collect();
            let t = shift_path(f, &grid, &w, &g);
            (w, t, g)
        })
        .collect();
    let mut ws = Vec::with_capacity(rows.len());
    let mut ts = Vec::with_capacity(rows.len());
    let mut gs = Vec::with_capacity(rows.len());
    for (w, t, g) in rows {
        ws.push(w);
        ts.push(t);
        gs.push(g);
    }
    Ok(TransportProcess {
        w: PathSet::from_rows(grid.clone(), ws),
        t: PathSet::from_rows(grid, ts),
        displacement: gs,
        solution,
    })
}

/// Which drift the decomposition `T = B + ∫ d dt` is built with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftSource {
    /// `d = -E_ν[D_t f | F_t]∘T` in closed form.
    ClosedForm,
    /// Least squares of `ΔT/Δt` on `(1, T_t)` within each cell.
    Regression,
    /// Least squares of `ΔT/Δt` on `(1, T_t, T_1)`: uses the future.
    FutureInformation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionOptions {
    pub windows: usize,
    /// State bins per window, split at empirical quantiles.
    pub bins: usize,
    pub min_samples: usize,
    pub drift_sigmas: f64,
    pub adaptedness_sigmas: f64,
    pub qv_sigmas: f64,
}

impl Default for DecompositionOptions {
    fn default() -> Self {
        Self {
            windows: 3,
            bins: 3,
            min_samples: 100,
            drift_sigmas: 2.0,
            adaptedness_sigmas: 3.0,
            qv_sigmas: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftCell {
    pub window: usize,
    pub bin: usize,
    pub time_range: (f64, f64),
    pub state_range: (f64, f64),
    pub samples: usize,
    /// Mean of the claimed drift over the cell.
    pub estimate: f64,
    /// Mean of the closed-form drift over the same samples.
    pub oracle: f64,
    pub std_error: f64,
    /// z-score of the state at the window start when added to the cell
    /// regression of the residual; conditioning on more of the prefix than
    /// `T_t` should not help.
    pub prefix_z: Option<f64>,
    pub passes: bool,
}

/// Regression of `T_1 - T_s` on `(1, T_s, B_s)`: an adapted `B` carries no
/// information about the future beyond `T_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptednessRow {
    pub time: f64,
    pub coefficient: f64,
    pub std_error: f64,
    pub passes: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticVariationRow {
    pub time: f64,
    pub value: MeanEstimate,
    pub band: f64,
    pub passes: bool,
}

#[derive(Debug, Clone)]
pub struct DecompositionReport {
    pub source: DriftSource,
    pub cells: Vec<DriftCell>,
    pub quadratic_variation: Vec<QuadraticVariationRow>,
    pub adaptedness: Vec<AdaptednessRow>,
    /// The martingale part `B^T` on every path.
    pub b: PathSet,
}

impl DecompositionReport {
    pub fn drift_passes(&self) -> bool {
        self.cells.iter().all(|c| c.passes)
    }

    pub fn qv_passes(&self) -> bool {
        self.quadratic_variation.iter().all(|r| r.passes)
    }

    pub fn adapted(&self) -> bool {
        self.adaptedness.iter().all(|r| r.passes)
    }

    pub fn passes(&self) -> bool {
        self.drift_passes() && self.qv_passes() && self.adapted()
    }

    /// Quadratic variation of `B^T` over `[0, 1]`.
    pub fn total_quadratic_variation(&self) -> &QuadraticVariationRow {
        self.quadratic_variation.last().expect("at least one window")
    }
}

/// Normal equations accumulated in a fixed order.
#[derive(Debug, Clone)]
struct Ols {
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    n: usize,
}

impl Ols {
    fn new(d: usize) -> Self {
        Self {
            xtx: DMatrix::zeros(d, d),
            xty: DVector::zeros(d),
            yty: 0.0,
            n: 0,
        }
    }

    fn add(&mut self, x: &[f64], y: f64) {
        let d = x.len();
        for a in 0..d {
            for b in 0..d {
                self.xtx[(a, b)] += x[a] * x[b];
            }
            self.xty[a] += x[a] * y;
        }
        self.yty += y * y;
        self.n += 1;
    }

    fn merge(&mut self, other: &Ols) {
        self.xtx += &other.xtx;
        self.xty += &other.xty;
        self.yty += other.yty;
        self.n += other.n;
    }

    /// Coefficients and their covariance, or `None` if the design is
    /// rank-deficient.
    fn solve(&self) -> Option<(DVector<f64>, DMatrix<f64>, f64)> {
        let d = self.xty.len();
        if self.n <= d {
            return None;
        }
        let scale = self.xtx.diagonal().map(|v| v.max(1e-300).sqrt());
        let norm = DMatrix::from_fn(d, d, |a, b| self.xtx[(a, b)] / (scale[a] * scale[b]));
        let eig = SymmetricEigen::new(norm.clone());
        if eig.eigenvalues.min() < 1e-10 * eig.eigenvalues.max() {
            return None;
        }
        let inv_norm = norm.try_inverse()?;
        let inv = DMatrix::from_fn(d, d, |a, b| inv_norm[(a, b)] / (scale[a] * scale[b]));
        let coef = &inv * &self.xty;
        let rss = (self.yty - coef.dot(&self.xty)).max(0.0);
        let s2 = rss / (self.n - d) as f64;
        Some((coef, inv * s2, s2))
    }
}

fn window_of(i: usize, steps: usize, windows: usize) -> usize {
    (i * windows / steps).min(windows - 1)
}

fn bin_of(x: f64, cuts: &[f64]) -> usize {
    cuts.partition_point(|&c| c <= x)
}

/// Tests `T_t = B_t + ∫₀ᵗ d dτ` with `d` the claimed drift: per
/// time-window and state-bin cell the mean of `d` must match the
/// closed-form `-E_ν[D_t f | F_t]∘T`, `B` must have quadratic variation
/// `t`, and `B` must be adapted to the filtration of `T`.
pub fn semimartingale_decomposition_check(
    process: &TransportProcess,
    f: &CylindricalFunctional,
    source: DriftSource,
    options: &DecompositionOptions,
) -> Result<DecompositionReport> {
    if options.windows == 0 || options.bins == 0 {
        return Err(Error::InvalidArgument("need at least one window and one bin".into()));
    }
    let grid = process.grid().clone();
    let steps = grid.steps();
    if steps < options.windows {
        return Err(Error::InvalidArgument("fewer steps than windows".into()));
    }
    let oracle = ClarkOconeDrift::closed_form(f, &grid)?;
    let tp = process.transported();
    let m = tp.len();
    let (nw, nb) = (options.windows, options.bins);
    let window_start: Vec<usize> = (0..nw).map(|w| (0..steps).find(|&i| window_of(i, steps, nw) == w).unwrap_or(0)).collect();

    // State cuts per window from pooled T_t values.
    let cuts: Vec<Vec<f64>> = (0..nw)
        .map(|w| {
            let mut xs: Vec<f64> = (0..m)
                .flat_map(|p| {
                    let path = tp.path(p);
                    (0..steps).filter(move |&i| window_of(i, steps, nw) == w).map(move |i| path[i])
                })
                .collect();
            xs.sort_by(f64::total_cmp);
            (1..nb).map(|b| xs[(b * xs.len()) / nb]).collect()
        })
        .collect();
    let cell_of = |i: usize, x: f64| {
        let w = window_of(i, steps, nw);
        w * nb + bin_of(x, &cuts[w])
    };
    let ncell = nw * nb;
    let oracle_paths: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|p| oracle.along(tp.path(p)).start.iter().map(|u| -u).collect())
        .collect();

    let design = |path: &[f64], i: usize| -> Vec<f64> {
        match source {
            DriftSource::ClosedForm => vec![],
            DriftSource::Regression => vec![1.0, path[i]],
            DriftSource::FutureInformation => vec![1.0, path[i], path[steps]],
        }
    };
    let dim = design(tp.path(0), 0).len();
    let coefs: Vec<Option<DVector<f64>>> = if dim == 0 {
        vec![None; ncell]
    } else {
        let partial: Vec<Vec<Ols>> = (0..m)
            .into_par_iter()
            .map(|p| {
                let path = tp.path(p);
                let mut acc = vec![Ols::new(dim); ncell];
                for i in 0..steps {
                    let y = (path[i + 1] - path[i]) / grid.dt(i);
                    acc[cell_of(i, path[i])].add(&design(path, i), y);
                }
                acc
            })
            .collect();
        let mut total = vec![Ols::new(dim); ncell];
        for part in &partial {
            for (t, a) in total.iter_mut().zip(part) {
                t.merge(a);
            }
        }
        total
            .iter()
            .enumerate()
            .map(|(c, o)| {
                if o.n < options.min_samples {
                    return Err(Error::InsufficientSamples(format!("cell {c} has {} samples", o.n)));
                }
                o.solve()
                    .map(|(b, _, _)| Some(b))
                    .ok_or_else(|| Error::Degenerate(format!("rank-deficient regression in cell {c}")))
            })
            .collect::<Result<_>>()?
    };
    let claimed = |p: usize, path: &[f64], i: usize| -> f64 {
        match source {
            DriftSource::ClosedForm => oracle_paths[p][i],
            _ => {
                let b = coefs[cell_of(i, path[i])].as_ref().expect("fitted cell");
                design(path, i).iter().zip(b.iter()).map(|(x, c)| x * c).sum()
            }
        }
    };

    // Per-path cell sums: n, Σd, Σo, Σr, Σr², plus the prefix regression.
    #[derive(Clone)]
    struct CellSums {
        n: usize,
        d: f64,
        o: f64,
        r: f64,
        r2: f64,
        lo: f64,
        hi: f64,
        prefix: Ols,
    }
    let empty = CellSums {
        n: 0,
        d: 0.0,
        o: 0.0,
        r: 0.0,
        r2: 0.0,
        lo: f64::INFINITY,
        hi: f64::NEG_INFINITY,
        prefix: Ols::new(3),
    };
    let per_path: Vec<(Vec<CellSums>, Vec<f64>)> = (0..m)
        .into_par_iter()
        .map(|p| {
            let path = tp.path(p);
            let mut sums = vec![empty.clone(); ncell];
            let mut b = Vec::with_capacity(steps + 1);
            b.push(path[0]);
            for i in 0..steps {
                let dt = grid.dt(i);
                let y = (path[i + 1] - path[i]) / dt;
                let d = claimed(p, path, i);
                let r = y - d;
                let s = &mut sums[cell_of(i, path[i])];
                s.n += 1;
                s.d += d;
                s.o += oracle_paths[p][i];
                s.r += r;
                s.r2 += r * r;
                s.lo = s.lo.min(path[i]);
                s.hi = s.hi.max(path[i]);
                let w0 = window_start[window_of(i, steps, nw)];
                s.prefix.add(&[1.0, path[i], path[w0]], r);
                b.push(b[i] + path[i + 1] - path[i] - d * dt);
            }
            (sums, b)
        })
        .collect();

    let mut totals = vec![empty; ncell];
    for (sums, _) in &per_path {
        for (t, s) in totals.iter_mut().zip(sums) {
            t.n += s.n;
            t.d += s.d;
            t.o += s.o;
            t.r += s.r;
            t.r2 += s.r2;
            t.lo = t.lo.min(s.lo);
            t.hi = t.hi.max(s.hi);
            t.prefix.merge(&s.prefix);
        }
    }
    let mut cells = Vec::with_capacity(ncell);
    for (c, t) in totals.iter().enumerate() {
        if t.n < options.min_samples {
            return Err(Error::InsufficientSamples(format!("cell {c} has {} samples", t.n)));
        }
        let n = t.n as f64;
        let mean_r = t.r / n;
        let var_r = ((t.r2 - n * mean_r * mean_r) / (n - 1.0)).max(0.0);
        let std_error = (var_r / n).sqrt();
        let (estimate, oracle_mean) = (t.d / n, t.o / n);
        let (w, bin) = (c / nb, c % nb);
        let prefix_z = t.prefix.solve().map(|(coef, cov, _)| coef[2] / cov[(2, 2)].sqrt()).filter(|z| z.is_finite());
        let first = window_start[w];
        let last = if w + 1 < nw { window_start[w + 1] } else { steps };
        cells.push(DriftCell {
            window: w,
            bin,
            time_range: (grid.time(first), grid.time(last)),
            state_range: (t.lo, t.hi),
            samples: t.n,
            estimate,
            oracle: oracle_mean,
            std_error,
            prefix_z,
            passes: (estimate - oracle_mean).abs() <= options.drift_sigmas * std_error,
        });
    }

    let b = PathSet::from_rows(grid.clone(), per_path.into_iter().map(|(_, b)| b).collect());
    let mf = m as f64;
    let quadratic_variation = (0..nw)
        .map(|w| {
            let end = if w + 1 < nw { window_start[w + 1] } else { steps };
            let t = grid.time(end);
            let qv: Vec<f64> = (0..m)
                .map(|p| b.path(p).windows(2).take(end).map(|x| (x[1] - x[0]).powi(2)).sum())
                .collect();
            let value = MeanEstimate::from_samples(&qv);
            let band = options.qv_sigmas * (2.0 * t).sqrt() / mf.sqrt();
            QuadraticVariationRow {
                time: t,
                value,
                band,
                passes: (value.mean - t).abs() <= band,
            }
        })
        .collect();

    let adaptedness = (0..nw)
        .map(|w| {
            let last = if w + 1 < nw { window_start[w + 1] } else { steps };
            let s = ((window_start[w] + last) / 2).max(1).min(steps - 1);
            let time = grid.time(s);
            // Residualize B_s on (1, T_s) first: if nothing is left, B_s is
            // a function of T_s.
            let mut base = Ols::new(2);
            for p in 0..m {
                base.add(&[1.0, tp.path(p)[s]], b.path(p)[s]);
            }
            let resid_var = base.solve().map(|(_, _, s2)| s2).unwrap_or(0.0);
            let scale = (base.yty / mf).max(1e-300);
            if resid_var <= 1e-20 * scale {
                return AdaptednessRow {
                    time,
                    coefficient: 0.0,
                    std_error: 0.0,
                    passes: true,
                };
            }
            let mut ols = Ols::new(3);
            for p in 0..m {
                let (tp_p, bp) = (tp.path(p), b.path(p));
                ols.add(&[1.0, tp_p[s], bp[s]], tp_p[steps] - tp_p[s]);
            }
            match ols.solve() {
                Some((coef, cov, _)) => {
                    let se = cov[(2, 2)].sqrt();
                    AdaptednessRow {
                        time,
                        coefficient: coef[2],
                        std_error: se,
                        passes: coef[2].abs() <= options.adaptedness_sigmas * se,
                    }
                }
                None => AdaptednessRow {
                    time,
                    coefficient: 0.0,
                    std_error: 0.0,
                    passes: true,
                },
            }
        })
        .collect();

    Ok(DecompositionReport {
        source,
        cells,
        quadratic_variation,
        adaptedness,
        b,
    })
}

/// Least squares with coefficient covariance and residual variance.
pub(crate) fn ols_fit(rows: &[(Vec<f64>, f64)]) -> Option<(DVector<f64>, DMatrix<f64>, f64)> {
    let d = rows.first()?.0.len();
    let mut ols = Ols::new(d);
    for (x, y) in rows {
        ols.add(x, *y);
    }
    ols.solve()
}
