//! Brownian paths on `[0, 1]` and transport of cylindrical densities on
//! classical Wiener space.
//!
//! A path is stored by its values at the grid times. Cylindrical
//! functionals depend on a path only through its values at a few anchor
//! times; whitening those values by the increments between anchors turns
//! the Cameron-Martin geometry into the Euclidean one on `R^k`, where the
//! finite-dimensional solvers apply.

mod checks;
mod drift;
mod process;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::gaussian::{expect, min_eigenvalue, DensitySpec, GaussianSpace, Method, ScalarField, EIGEN_TOL};
use crate::rng::stream_seed;

pub use checks::{
    free_energy_identity, ito_density_check, ito_jacobian, rotation_check, ChangeOfVariablesRow, DensityCheckReport,
    FreeEnergyReport, ItoJacobianReport, RotationCost, RotationReport,
};
pub use drift::{clark_ocone_drift, ClarkOconeDrift, DriftEstimator, DriftPath, MIN_EFFECTIVE_SAMPLES};
pub use process::{
    anchor_transport, semimartingale_decomposition_check, transport_process, AdaptednessRow, DecompositionOptions,
    DecompositionReport, DriftCell, DriftSource, QuadraticVariationRow, TransportProcess,
};

const TIME_TOL: f64 = 1e-12;

/// How stochastic and time integrals are discretized on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IntegralScheme {
    /// Left-point Riemann sums.
    LeftPoint,
    /// Trapezoid sums; the stochastic integral subtracts `½ ∂ₓu Δt` so the
    /// result converges to the Itô integral, with strong order one.
    #[default]
    ItoTrapezoid,
}

/// Strictly increasing times from exactly 0 to exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("time grid needs at least one step".into()));
        }
        let times = (0..=steps).map(|i| i as f64 / steps as f64).collect();
        Ok(Self { times })
    }

    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidArgument("time grid needs at least two times".into()));
        }
        if times[0] != 0.0 || times[times.len() - 1] != 1.0 {
            return Err(Error::InvalidArgument("time grid must start at 0 and end at 1".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("time grid must be strictly increasing".into()));
        }
        Ok(Self { times })
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn dt(&self, i: usize) -> f64 {
        self.times[i + 1] - self.times[i]
    }

    /// Index of the grid time equal to `t`, if any.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let i = self.times.partition_point(|&s| s < t - TIME_TOL);
        (i < self.times.len() && (self.times[i] - t).abs() <= TIME_TOL).then_some(i)
    }

    /// Index of the grid time closest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        (0..self.times.len())
            .min_by(|&a, &b| (self.times[a] - t).abs().total_cmp(&(self.times[b] - t).abs()))
            .expect("nonempty grid")
    }

    /// Keeps every `factor`-th time.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.steps().is_multiple_of(factor) {
            return Err(Error::InvalidArgument(format!(
                "cannot coarsen {} steps by a factor of {factor}",
                self.steps()
            )));
        }
        Ok(Self {
            times: self.times.iter().step_by(factor).copied().collect(),
        })
    }
}

/// Path values at the grid times, one row per path.
#[derive(Debug, Clone)]
pub struct PathSet {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl PathSet {
    pub(crate) fn from_rows(grid: TimeGrid, rows: Vec<Vec<f64>>) -> Self {
        let width = grid.steps() + 1;
        let mut values = Vec::with_capacity(rows.len() * width);
        for r in rows {
            debug_assert_eq!(r.len(), width);
            values.extend_from_slice(&r);
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn width(&self) -> usize {
        self.grid.steps() + 1
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.width()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn path(&self, p: usize) -> &[f64] {
        let w = self.width();
        &self.values[p * w..(p + 1) * w]
    }

    /// Values of all paths at grid index `i`.
    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.len()).map(|p| self.path(p)[i]).collect()
    }

    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsen(factor)?;
        let rows = (0..self.len())
            .map(|p| self.path(p).iter().step_by(factor).copied().collect())
            .collect();
        Ok(Self::from_rows(grid, rows))
    }
}

/// Brownian increments on a time grid, one independent seed per path.
#[derive(Debug, Clone)]
pub struct BrownianEnsemble {
    grid: TimeGrid,
    /// Grid the increments were drawn on; `grid` may be a coarsening.
    base_grid: TimeGrid,
    seeds: Vec<u64>,
    increments: Vec<f64>,
}

fn draw_increments(seed: u64, grid: &TimeGrid) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..grid.steps())
        .map(|i| {
            let z: f64 = rng.sample(StandardNormal);
            z * grid.dt(i).sqrt()
        })
        .collect()
}

fn sum_blocks(fine: &[f64], factor: usize) -> Vec<f64> {
    fine.chunks(factor).map(|c| c.iter().sum()).collect()
}

/// Simulates `m` Brownian paths; path `p` uses the stream seed `(seed, p)`.
pub fn simulate_paths(m: usize, grid: &TimeGrid, seed: u64) -> Result<BrownianEnsemble> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one path".into()));
    }
    let seeds: Vec<u64> = (0..m as u64).map(|p| stream_seed(seed, p)).collect();
    let rows: Vec<Vec<f64>> = seeds.par_iter().map(|&s| draw_increments(s, grid)).collect();
    Ok(BrownianEnsemble {
        grid: grid.clone(),
        base_grid: grid.clone(),
        seeds,
        increments: rows.concat(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquareReport {
    pub paths: usize,
    pub rejections: usize,
    pub alpha: f64,
    /// Largest rejection count consistent with the level (mean plus three
    /// binomial standard deviations).
    pub allowed: f64,
}

impl ChiSquareReport {
    pub fn passes(&self) -> bool {
        self.rejections as f64 <= self.allowed
    }
}

impl BrownianEnsemble {
    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn increments(&self, p: usize) -> &[f64] {
        let k = self.grid.steps();
        &self.increments[p * k..(p + 1) * k]
    }

    /// Redraws the increments of path `p` from its seed.
    pub fn regenerate(&self, p: usize) -> Vec<f64> {
        let fine = draw_increments(self.seeds[p], &self.base_grid);
        sum_blocks(&fine, self.base_grid.steps() / self.grid.steps())
    }

    /// `W` at the grid times for path `p`.
    pub fn values(&self, p: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.grid.steps() + 1);
        let mut w = 0.0;
        out.push(w);
        for &dw in self.increments(p) {
            w += dw;
            out.push(w);
        }
        out
    }

    pub fn paths(&self) -> PathSet {
        let rows: Vec<Vec<f64>> = (0..self.len()).into_par_iter().map(|p| self.values(p)).collect();
        PathSet::from_rows(self.grid.clone(), rows)
    }

    /// Same paths observed on every `factor`-th grid time.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsen(factor)?;
        let increments = (0..self.len())
            .flat_map(|p| sum_blocks(self.increments(p), factor))
            .collect();
        Ok(Self {
            grid,
            base_grid: self.base_grid.clone(),
            seeds: self.seeds.clone(),
            increments,
        })
    }

    /// Two-sided test of `Σ ΔW²/Δt ~ χ²_K` on every path at level `alpha`.
    pub fn chi_square_check(&self, alpha: f64) -> Result<ChiSquareReport> {
        let k = self.grid.steps();
        let dist = ChiSquared::new(k as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let rejections = (0..self.len())
            .filter(|&p| {
                let s: f64 = self
                    .increments(p)
                    .iter()
                    .enumerate()
                    .map(|(i, dw)| dw * dw / self.grid.dt(i))
                    .sum();
                let c = dist.cdf(s);
                2.0 * c.min(1.0 - c) < alpha
            })
            .count();
        let m = self.len() as f64;
        Ok(ChiSquareReport {
            paths: self.len(),
            rejections,
            alpha,
            allowed: m * alpha + 3.0 * (m * alpha * (1.0 - alpha)).sqrt(),
        })
    }
}

/// `f(w) = f₀(w(t₁), ..., w(t_k))` for anchor times `t₁ < ... < t_k` on the
/// grid, with density `e^{-f}/c` against Wiener measure.
#[derive(Debug, Clone)]
pub struct CylindricalFunctional {
    anchors: Vec<usize>,
    anchor_times: Vec<f64>,
    core: ScalarField,
    quadratic: Option<(DMatrix<f64>, DVector<f64>)>,
    convex: bool,
    normalization: f64,
}

fn anchor_indices(grid: &TimeGrid, times: &[f64]) -> Result<Vec<usize>> {
    if times.is_empty() {
        return Err(Error::InvalidArgument("at least one anchor time is required".into()));
    }
    let idx = times
        .iter()
        .map(|&t| {
            grid.index_of(t)
                .filter(|&i| i > 0)
                .ok_or_else(|| Error::InvalidArgument(format!("anchor time {t} is not a positive grid time")))
        })
        .collect::<Result<Vec<_>>>()?;
    if idx.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("anchor times must be strictly increasing".into()));
    }
    Ok(idx)
}

/// Lower-triangular `M` with `y = Mξ`, where `ξ_j` are the normalized
/// increments between consecutive anchors.
fn whitening(times: &[f64]) -> DMatrix<f64> {
    let k = times.len();
    let widths: Vec<f64> = (0..k)
        .map(|j| (times[j] - if j == 0 { 0.0 } else { times[j - 1] }).sqrt())
        .collect();
    DMatrix::from_fn(k, k, |j, l| if l <= j { widths[l] } else { 0.0 })
}

impl CylindricalFunctional {
    /// `f ≡ 0`, anchored at `t = 1`.
    pub fn zero(grid: &TimeGrid) -> Self {
        Self::quadratic(grid, &[1.0], DMatrix::zeros(1, 1), DVector::zeros(1)).expect("zero functional is valid")
    }

    /// `f(w) = λ w(1)² / 2`.
    pub fn squared_endpoint(grid: &TimeGrid, lambda: f64) -> Result<Self> {
        Self::quadratic(grid, &[1.0], DMatrix::from_element(1, 1, lambda), DVector::zeros(1))
    }

    /// `f₀(y) = ½ yᵀAy + b·y`, with `c` in closed form.
    pub fn quadratic(grid: &TimeGrid, anchor_times: &[f64], a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let anchors = anchor_indices(grid, anchor_times)?;
        let k = anchors.len();
        if a.nrows() != k || a.ncols() != k {
            return Err(Error::DimensionMismatch { expected: k, got: a.nrows() });
        }
        if b.len() != k {
            return Err(Error::DimensionMismatch { expected: k, got: b.len() });
        }
        let asym = (&a - a.transpose()).amax();
        if asym > 1e-12 * (1.0 + a.amax()) {
            return Err(Error::NotSymmetric { asymmetry: asym });
        }
        let times: Vec<f64> = anchors.iter().map(|&i| grid.time(i)).collect();
        let m = whitening(&times);
        let a_xi = m.transpose() * &a * &m;
        let b_xi = m.transpose() * &b;
        let precision = DMatrix::identity(k, k) + &a_xi;
        let chol = precision
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotIntegrable(format!("I + MᵀAM is not positive definite ({})", min_eigenvalue(&precision))))?;
        let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let log_c = -0.5 * log_det + 0.5 * b_xi.dot(&chol.solve(&b_xi));
        Ok(Self {
            anchors,
            anchor_times: times,
            core: ScalarField::quadratic(a.clone(), b.clone(), 0.0),
            convex: min_eigenvalue(&a) >= -EIGEN_TOL,
            quadratic: Some((a, b)),
            normalization: log_c.exp(),
        })
    }

    /// General core; `c` is computed by Gauss-Hermite quadrature of the given
    /// order in the whitened coordinates. `convex` declares `f₀` convex.
    pub fn new(grid: &TimeGrid, anchor_times: &[f64], core: ScalarField, convex: bool, order: usize) -> Result<Self> {
        let anchors = anchor_indices(grid, anchor_times)?;
        let k = anchors.len();
        if core.dim() != k {
            return Err(Error::DimensionMismatch { expected: k, got: core.dim() });
        }
        let times: Vec<f64> = anchors.iter().map(|&i| grid.time(i)).collect();
        let m = whitening(&times);
        let space = GaussianSpace::standard(k).with_quadrature_order(order);
        let c = expect(
            |xi| {
                let y = &m * DVector::from_column_slice(xi);
                (-core.value(y.as_slice())).exp()
            },
            &space,
            Method::Quadrature,
        )?
        .mean;
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::NotIntegrable(format!("normalization {c}")));
        }
        Ok(Self {
            anchors,
            anchor_times: times,
            core,
            quadratic: None,
            convex,
            normalization: c,
        })
    }

    pub fn dim(&self) -> usize {
        self.anchors.len()
    }

    /// The same functional with anchors located on another grid.
    pub fn regrid(&self, grid: &TimeGrid) -> Result<Self> {
        Ok(Self {
            anchors: anchor_indices(grid, &self.anchor_times)?,
            ..self.clone()
        })
    }

    /// Grid indices of the anchors.
    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }

    pub fn anchor_times(&self) -> &[f64] {
        &self.anchor_times
    }

    pub fn core(&self) -> &ScalarField {
        &self.core
    }

    /// `(A, b)` when the core is quadratic.
    pub fn quadratic_form(&self) -> Option<(&DMatrix<f64>, &DVector<f64>)> {
        self.quadratic.as_ref().map(|(a, b)| (a, b))
    }

    pub fn is_convex(&self) -> bool {
        self.convex
    }

    /// `c = E[e^{-f}]`.
    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    pub fn whitening(&self) -> DMatrix<f64> {
        whitening(&self.anchor_times)
    }

    pub fn anchor_values(&self, path: &[f64]) -> Vec<f64> {
        self.anchors.iter().map(|&i| path[i]).collect()
    }

    /// Normalized increments between anchors.
    pub fn whitened(&self, path: &[f64]) -> Vec<f64> {
        let mut prev = (0.0, 0.0);
        self.anchors
            .iter()
            .zip(&self.anchor_times)
            .map(|(&i, &t)| {
                let xi = (path[i] - prev.0) / (t - prev.1).sqrt();
                prev = (path[i], t);
                xi
            })
            .collect()
    }

    pub fn value(&self, path: &[f64]) -> f64 {
        self.core.value(&self.anchor_values(path))
    }

    /// `L = e^{-f}/c`.
    pub fn density(&self, path: &[f64]) -> f64 {
        (-self.value(path)).exp() / self.normalization
    }

    /// `D_t f = Σ_{t_j ≥ t} ∂_j f₀`.
    pub fn derivative(&self, path: &[f64], t: f64) -> f64 {
        let g = self.core.gradient(&self.anchor_values(path));
        self.anchor_times
            .iter()
            .zip(g.iter())
            .filter(|(&tj, _)| tj >= t - TIME_TOL)
            .map(|(_, d)| d)
            .sum()
    }

    /// The density seen in the whitened anchor coordinates.
    pub fn whitened_density(&self) -> Result<DensitySpec> {
        let m = self.whitening();
        let (c1, c2, c3) = (self.core.clone(), self.core.clone(), self.core.clone());
        let (m1, m2, m3) = (m.clone(), m.clone(), m);
        let exponent = ScalarField::new(
            self.dim(),
            move |xi| c1.value((&m1 * DVector::from_column_slice(xi)).as_slice()),
            move |xi| m2.transpose() * c2.gradient((&m2 * DVector::from_column_slice(xi)).as_slice()),
            move |xi| m3.transpose() * c3.hessian((&m3 * DVector::from_column_slice(xi)).as_slice()) * &m3,
        );
        DensitySpec::new(exponent, self.normalization, None, self.convex)
    }
}
