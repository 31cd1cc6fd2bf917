use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{BrownianEnsemble, CylindricalFunctional, IntegralScheme, PathSet, TimeGrid, TIME_TOL};
use crate::error::{Error, Result};

/// Smallest effective sample size accepted at a regression knot.
pub const MIN_EFFECTIVE_SAMPLES: f64 = 10.0;
const REGRESSION_KNOTS: usize = 65;
const KNOT_QUANTILE: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DriftEstimator {
    /// Gaussian conditioning; needs a quadratic core.
    ClosedFormGaussian,
    /// Nadaraya-Watson regression of `D_t f` on `W_t` under `ν`, by
    /// importance weighting with `L`; needs a single anchor.
    KernelRegression { bandwidth: f64 },
}

/// `u = a·x + Σ c_j w(t_j) + b`, with `x` the current path value and the
/// sum over anchors already passed.
#[derive(Debug, Clone, PartialEq)]
struct Affine {
    current: f64,
    past: Vec<(usize, f64)>,
    constant: f64,
}

/// Piecewise-linear function of the current value, flat outside the knots.
#[derive(Debug, Clone, PartialEq)]
struct Table {
    knots: Vec<f64>,
    values: Vec<f64>,
}

impl Table {
    fn segment(&self, x: f64) -> Option<usize> {
        let n = self.knots.len();
        if n < 2 || x <= self.knots[0] || x >= self.knots[n - 1] {
            return None;
        }
        Some(self.knots.partition_point(|&k| k <= x).clamp(1, n - 1) - 1)
    }

    fn eval(&self, x: f64) -> f64 {
        let n = self.knots.len();
        match self.segment(x) {
            Some(i) => {
                let s = (x - self.knots[i]) / (self.knots[i + 1] - self.knots[i]);
                self.values[i] + s * (self.values[i + 1] - self.values[i])
            }
            None if n == 1 || x <= self.knots[0] => self.values[0],
            None => self.values[n - 1],
        }
    }

    fn slope(&self, x: f64) -> f64 {
        self.segment(x)
            .map(|i| (self.values[i + 1] - self.values[i]) / (self.knots[i + 1] - self.knots[i]))
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone)]
enum Rule {
    Affine(Affine),
    Table(Table),
    /// `∂f₀` at the current value; used when the single anchor is the
    /// current time.
    Gradient(crate::gaussian::ScalarField),
}

impl Rule {
    fn reindex(&self, factor: usize) -> Self {
        match self {
            Rule::Affine(a) => Rule::Affine(Affine {
                current: a.current,
                past: a.past.iter().map(|&(i, c)| (i / factor, c)).collect(),
                constant: a.constant,
            }),
            other => other.clone(),
        }
    }

    fn zero() -> Self {
        Rule::Affine(Affine {
            current: 0.0,
            past: Vec::new(),
            constant: 0.0,
        })
    }

    fn eval(&self, x: f64, path: &[f64]) -> f64 {
        match self {
            Rule::Affine(a) => a.current * x + a.past.iter().map(|&(i, c)| c * path[i]).sum::<f64>() + a.constant,
            Rule::Table(t) => t.eval(x),
            Rule::Gradient(f) => f.gradient(&[x])[0],
        }
    }

    fn slope(&self, x: f64) -> f64 {
        match self {
            Rule::Affine(a) => a.current,
            Rule::Table(t) => t.slope(x),
            Rule::Gradient(f) => f.hessian(&[x])[(0, 0)],
        }
    }
}

/// `u_t = E_ν[D_t f | F_t]` as a rule per grid step. On step `i` the drift
/// is continuous on `(t_i, t_{i+1})`; `start` holds the right limit at `t_i`
/// and `end` the left limit at `t_{i+1}`.
#[derive(Debug, Clone)]
pub struct ClarkOconeDrift {
    grid: TimeGrid,
    start: Vec<Rule>,
    end: Vec<Rule>,
    estimator: DriftEstimator,
}

/// Drift along one path, per step.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftPath {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    /// `∂u/∂x` at the start of each step.
    pub slope: Vec<f64>,
}

impl DriftPath {
    /// `∫ u dx` along the path `x` the drift was evaluated on.
    pub fn stochastic_integral(&self, x: &[f64], grid: &TimeGrid, scheme: IntegralScheme) -> f64 {
        (0..grid.steps())
            .map(|i| {
                let dx = x[i + 1] - x[i];
                match scheme {
                    IntegralScheme::LeftPoint => self.start[i] * dx,
                    IntegralScheme::ItoTrapezoid => {
                        0.5 * (self.start[i] + self.end[i]) * dx - 0.5 * self.slope[i] * grid.dt(i)
                    }
                }
            })
            .sum()
    }

    /// `∫ u² dt`.
    pub fn square_integral(&self, grid: &TimeGrid, scheme: IntegralScheme) -> f64 {
        (0..grid.steps())
            .map(|i| match scheme {
                IntegralScheme::LeftPoint => self.start[i].powi(2) * grid.dt(i),
                IntegralScheme::ItoTrapezoid => 0.5 * (self.start[i].powi(2) + self.end[i].powi(2)) * grid.dt(i),
            })
            .sum()
    }

    /// `∫₀^{t_i} u dt` at every grid time.
    pub fn cumulative(&self, grid: &TimeGrid, scheme: IntegralScheme) -> Vec<f64> {
        let mut out = Vec::with_capacity(grid.steps() + 1);
        let mut acc = 0.0;
        out.push(acc);
        for i in 0..grid.steps() {
            acc += match scheme {
                IntegralScheme::LeftPoint => self.start[i],
                IntegralScheme::ItoTrapezoid => 0.5 * (self.start[i] + self.end[i]),
            } * grid.dt(i);
            out.push(acc);
        }
        out
    }
}

impl ClarkOconeDrift {
    /// Closed form for a quadratic core by Gaussian conditioning.
    pub fn closed_form(f: &CylindricalFunctional, grid: &TimeGrid) -> Result<Self> {
        let (a, b) = f
            .quadratic_form()
            .ok_or_else(|| Error::Unsupported("closed-form drift needs a quadratic core".into()))?;
        let k = grid.steps();
        let mut start = Vec::with_capacity(k);
        let mut end = Vec::with_capacity(k);
        for i in 0..k {
            // Anchors still ahead on the open step (t_i, t_{i+1}).
            let relevant: Vec<usize> = (0..f.dim()).filter(|&j| f.anchors()[j] > i).collect();
            start.push(conditioned_rule(f, a, b, &relevant, i, grid)?);
            end.push(conditioned_rule(f, a, b, &relevant, i + 1, grid)?);
        }
        Ok(Self {
            grid: grid.clone(),
            start,
            end,
            estimator: DriftEstimator::ClosedFormGaussian,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn estimator(&self) -> DriftEstimator {
        self.estimator
    }

    /// Evaluates the drift along a path of values on the grid; the path may
    /// be `W` or a transported path.
    pub fn along(&self, path: &[f64]) -> DriftPath {
        let k = self.grid.steps();
        let mut out = DriftPath {
            start: Vec::with_capacity(k),
            end: Vec::with_capacity(k),
            slope: Vec::with_capacity(k),
        };
        for i in 0..k {
            out.start.push(self.start[i].eval(path[i], path));
            out.slope.push(self.start[i].slope(path[i]));
            out.end.push(self.end[i].eval(path[i + 1], path));
        }
        out
    }

    /// `u` at every grid time of every path: the right limit at `t_i < 1`
    /// and the left limit at `t = 1`.
    pub fn values(&self, paths: &PathSet) -> Vec<Vec<f64>> {
        (0..paths.len())
            .into_par_iter()
            .map(|p| {
                let d = self.along(paths.path(p));
                let mut v = d.start;
                v.push(*d.end.last().expect("at least one step"));
                v
            })
            .collect()
    }

    /// The same drift on every `factor`-th grid time. Anchors must lie on
    /// the coarse grid.
    pub fn coarsen(&self, factor: usize, f: &CylindricalFunctional) -> Result<Self> {
        let grid = self.grid.coarsen(factor)?;
        if f.anchors().iter().any(|&i| i % factor != 0) {
            return Err(Error::InvalidArgument("anchors are not on the coarse grid".into()));
        }
        let n = grid.steps();
        Ok(Self {
            start: (0..n).map(|j| self.start[j * factor].reindex(factor)).collect(),
            end: (0..n).map(|j| self.end[(j + 1) * factor - 1].reindex(factor)).collect(),
            estimator: self.estimator,
            grid,
        })
    }
}

/// `Σ_{j∈relevant} (A E_ν[y | F_t] + b)_j` at grid index `i`, as an affine
/// rule in the current value and the anchors already passed. Unknown
/// anchors given `w(t)` are Gaussian with mean `w(t)` and covariance
/// `min(t_j, t_l) - t`, tilted by `e^{-f₀}`.
fn conditioned_rule(
    f: &CylindricalFunctional,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    relevant: &[usize],
    i: usize,
    grid: &TimeGrid,
) -> Result<Rule> {
    if relevant.is_empty() {
        return Ok(Rule::zero());
    }
    let t = grid.time(i);
    let k = f.dim();
    let known: Vec<usize> = (0..k).filter(|&j| f.anchors()[j] <= i).collect();
    let unknown: Vec<usize> = (0..k).filter(|&j| f.anchors()[j] > i).collect();
    // r = Σ_{j ∈ relevant} A_{j,·}
    let r: Vec<f64> = (0..k).map(|l| relevant.iter().map(|&j| a[(j, l)]).sum()).collect();
    let mut constant: f64 = relevant.iter().map(|&j| b[j]).sum();
    let mut current = 0.0;
    let mut past_coef: Vec<f64> = known.iter().map(|&j| r[j]).collect();

    if !unknown.is_empty() {
        let u = unknown.len();
        let times = f.anchor_times();
        let cov = DMatrix::from_fn(u, u, |p, q| times[unknown[p]].min(times[unknown[q]]) - t);
        let cov_inv = cov
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("singular conditional covariance".into()))?;
        let a_ff = DMatrix::from_fn(u, u, |p, q| a[(unknown[p], unknown[q])]);
        let precision = &cov_inv + a_ff;
        let chol = precision
            .cholesky()
            .ok_or_else(|| Error::NotIntegrable(format!("conditional precision at t = {t} is not positive definite")))?;
        let r_f = DVector::from_iterator(u, unknown.iter().map(|&j| r[j]));
        // h = Q⁻¹ r_F, so r_F·μ_F = h·(C⁻¹1 x - A_FP y_P - b_F).
        let h = chol.solve(&r_f);
        current += h.dot(&(&cov_inv * DVector::from_element(u, 1.0)));
        constant -= unknown.iter().enumerate().map(|(p, &j)| h[p] * b[j]).sum::<f64>();
        for (q, &jp) in known.iter().enumerate() {
            past_coef[q] -= unknown.iter().enumerate().map(|(p, &jf)| h[p] * a[(jf, jp)]).sum::<f64>();
        }
    }
    let mut past = Vec::new();
    for (q, &j) in known.iter().enumerate() {
        if (f.anchor_times()[j] - t).abs() <= TIME_TOL {
            current += past_coef[q];
        } else if past_coef[q] != 0.0 {
            past.push((f.anchors()[j], past_coef[q]));
        }
    }
    Ok(Rule::Affine(Affine { current, past, constant }))
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Weighted Nadaraya-Watson fit of `y` on `x` with a Gaussian kernel.
fn kernel_table(x: &[f64], y: &[f64], w: &[f64], bandwidth: f64, t: f64) -> Result<Table> {
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (quantile_sorted(&sorted, KNOT_QUANTILE), quantile_sorted(&sorted, 1.0 - KNOT_QUANTILE));
    let knots: Vec<f64> = if hi - lo < 1e-12 {
        vec![0.5 * (lo + hi)]
    } else {
        (0..REGRESSION_KNOTS)
            .map(|j| lo + (hi - lo) * j as f64 / (REGRESSION_KNOTS - 1) as f64)
            .collect()
    };
    let values = knots
        .iter()
        .map(|&q| {
            let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
            for p in 0..x.len() {
                let z = (q - x[p]) / bandwidth;
                let k = (-0.5 * z * z).exp() * w[p];
                s0 += k;
                s1 += k * y[p];
                s2 += k * k;
            }
            let effective = if s2 > 0.0 { s0 * s0 / s2 } else { 0.0 };
            if effective < MIN_EFFECTIVE_SAMPLES {
                return Err(Error::InsufficientSamples(format!(
                    "effective sample size {effective:.1} at state {q:.3}, time {t:.4}"
                )));
            }
            Ok(s1 / s0)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Table { knots, values })
}

/// `u_t = E_ν[D_t f | F_t]` for every grid time of the ensemble.
pub fn clark_ocone_drift(
    f: &CylindricalFunctional,
    ensemble: &BrownianEnsemble,
    estimator: DriftEstimator,
) -> Result<ClarkOconeDrift> {
    let grid = ensemble.grid();
    match estimator {
        DriftEstimator::ClosedFormGaussian => ClarkOconeDrift::closed_form(f, grid),
        DriftEstimator::KernelRegression { bandwidth } => {
            if !(bandwidth > 0.0 && bandwidth.is_finite()) {
                return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {bandwidth}")));
            }
            if f.dim() != 1 {
                return Err(Error::Unsupported("kernel regression drift needs a single anchor".into()));
            }
            let anchor = f.anchors()[0];
            let paths = ensemble.paths();
            let weights: Vec<f64> = (0..paths.len()).map(|p| f.density(paths.path(p))).collect();
            let targets: Vec<f64> = paths.column(anchor).iter().map(|&y| f.core().gradient(&[y])[0]).collect();
            let tables = (0..anchor)
                .into_par_iter()
                .map(|i| kernel_table(&paths.column(i), &targets, &weights, bandwidth, grid.time(i)))
                .collect::<Result<Vec<Table>>>()?;
            let k = grid.steps();
            let mut start = Vec::with_capacity(k);
            let mut end = Vec::with_capacity(k);
            for i in 0..k {
                if i < anchor {
                    start.push(Rule::Table(tables[i].clone()));
                    end.push(if i + 1 < anchor {
                        Rule::Table(tables[i + 1].clone())
                    } else {
                        Rule::Gradient(f.core().clone())
                    });
                } else {
                    start.push(Rule::zero());
                    end.push(Rule::zero());
                }
            }
            Ok(ClarkOconeDrift {
                grid: grid.clone(),
                start,
                end,
                estimator,
            })
        }
    }
}
