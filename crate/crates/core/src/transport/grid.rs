use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::discrete::DiscreteCoupling;
use super::solution::{backward_potential, SolverKind, TransportSolution, VectorMap};
use crate::error::{Error, Result};
use crate::gaussian::{DensitySpec, Differentiation, ScalarField};
use crate::stats::std_normal_log_pdf;

/// A square grid `[-radius, radius]^dim` with `points` nodes per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub dim: usize,
    pub radius: f64,
    pub points: usize,
}

impl GridSpec {
    /// Requires `dim ∈ {1, 2}`, an odd node count (so the origin is a node)
    /// and `radius ≥ 3`, i.e. at least six standard deviations of coverage.
    pub fn new(dim: usize, radius: f64, points: usize) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::Unsupported(format!("grid solver handles dimensions 1 and 2, got {dim}")));
        }
        if !(radius >= 3.0 && radius.is_finite()) {
            return Err(Error::InvalidArgument(format!("grid radius must be at least 3, got {radius}")));
        }
        if points < 5 || points.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("grid needs an odd node count of at least 5, got {points}")));
        }
        Ok(Self { dim, radius, points })
    }

    /// `R = 4`, 41 nodes per axis.
    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(dim, 4.0, 41)
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.radius / (self.points - 1) as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn axis(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.points).map(|i| -self.radius + h * i as f64).collect()
    }

    pub fn len(&self) -> usize {
        self.points.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn index(&self, flat: usize) -> [usize; 2] {
        if self.dim == 1 {
            [flat, 0]
        } else {
            [flat / self.points, flat % self.points]
        }
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let h = self.spacing();
        let idx = self.index(flat);
        (0..self.dim).map(|d| -self.radius + h * idx[d] as f64).collect()
    }

    pub fn nodes(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }

    /// Halving schedule from 1 down to `1e-3` times the cell volume.
    pub fn default_schedule(&self) -> Vec<f64> {
        let last = 1e-3 * self.cell_volume();
        let mut eps = vec![1.0];
        while eps[eps.len() - 1] * 0.5 > last {
            let next = eps[eps.len() - 1] * 0.5;
            eps.push(next);
        }
        eps.push(last);
        eps
    }

    fn multilinear(&self, values: &[f64], width: usize, x: &[f64]) -> Vec<f64> {
        let h = self.spacing();
        let n = self.points;
        let mut base = [0usize; 2];
        let mut frac = [0.0f64; 2];
        for d in 0..self.dim {
            let u = ((x[d].clamp(-self.radius, self.radius) + self.radius) / h).min((n - 1) as f64);
            let i = (u.floor() as usize).min(n - 2);
            base[d] = i;
            frac[d] = u - i as f64;
        }
        let mut out = vec![0.0; width];
        let corners = 1usize << self.dim;
        for c in 0..corners {
            let mut w = 1.0;
            let mut flat = 0;
            for d in 0..self.dim {
                let bit = (c >> d) & 1;
                w *= if bit == 1 { frac[d] } else { 1.0 - frac[d] };
                flat = flat * n + base[d] + bit;
            }
            if w == 0.0 {
                continue;
            }
            for k in 0..width {
                out[k] += w * values[flat * width + k];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropicOptions {
    /// Decreasing regularization levels; the last one must not exceed
    /// `1e-3` times the grid cell volume.
    pub schedule: Vec<f64>,
    pub max_iterations: usize,
    /// L1 marginal tolerance at the final level.
    pub tolerance: f64,
    /// Over-relaxation factor `ω ∈ (0, 2)` of the dual updates; 1 is plain
    /// Sinkhorn.
    pub relaxation: f64,
}

impl EntropicOptions {
    pub fn for_grid(grid: &GridSpec) -> Self {
        Self {
            schedule: grid.default_schedule(),
            max_iterations: 20_000,
            tolerance: 1e-5,
            relaxation: 1.8,
        }
    }
}

fn relax(old: f64, new: f64, omega: f64) -> f64 {
    if old.is_finite() {
        (1.0 - omega) * old + omega * new
    } else {
        new
    }
}

/// Terms this far below the maximum are dropped from log-sum-exp.
const LSE_CUTOFF: f64 = -50.0;

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values
        .filter(|v| *v - m > LSE_CUTOFF)
        .map(|v| (v - m).exp())
        .sum::<f64>()
        .ln()
}

/// Log-domain Sinkhorn with the separable cost `½|x - y|²` on a grid.
struct Sinkhorn<'a> {
    grid: &'a GridSpec,
    /// `½ (x_i - x_j)² / ε` along one axis.
    kernel: Vec<f64>,
    tmp: Vec<f64>,
}

impl<'a> Sinkhorn<'a> {
    fn new(grid: &'a GridSpec) -> Self {
        Self {
            grid,
            kernel: vec![0.0; grid.points * grid.points],
            tmp: vec![0.0; grid.len()],
        }
    }

    fn set_epsilon(&mut self, eps: f64) {
        let axis = self.grid.axis();
        let n = self.grid.points;
        for i in 0..n {
            for j in 0..n {
                self.kernel[i * n + j] = 0.5 * (axis[i] - axis[j]).powi(2) / eps;
            }
        }
    }

    /// `out_i = log Σ_j exp(v_j - c_ij / ε)`.
    fn softmin(&mut self, v: &[f64], out: &mut [f64]) {
        let n = self.grid.points;
        let k = &self.kernel;
        if self.grid.dim == 1 {
            for i in 0..n {
                out[i] = log_sum_exp((0..n).map(|j| v[j] - k[i * n + j]));
            }
            return;
        }
        for a in 0..n {
            for i in 0..n {
                self.tmp[a * n + i] = log_sum_exp((0..n).map(|j| v[a * n + j] - k[i * n + j]));
            }
        }
        let tmp = &self.tmp;
        for i in 0..n {
            for b in 0..n {
                out[i * n + b] = log_sum_exp((0..n).map(|j| tmp[j * n + b] - k[i * n + j]));
            }
        }
    }
}

fn validate(options: &EntropicOptions, grid: &GridSpec) -> Result<()> {
    let s = &options.schedule;
    if s.is_empty() || s.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        return Err(Error::InvalidArgument("epsilon schedule must be a nonempty list of positive reals".into()));
    }
    if s.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::InvalidArgument("epsilon schedule must be decreasing".into()));
    }
    if !(options.relaxation > 0.0 && options.relaxation < 2.0) {
        return Err(Error::InvalidArgument(format!("relaxation must lie in (0, 2), got {}", options.relaxation)));
    }
    let limit = 1e-3 * grid.cell_volume();
    if s[s.len() - 1] > limit * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "final epsilon {} exceeds 1e-3 times the cell volume ({limit})",
            s[s.len() - 1]
        )));
    }
    Ok(())
}

fn normalized_logs(weights: Vec<f64>) -> Result<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::NotIntegrable("discretized density has no finite positive mass".into()));
    }
    Ok(weights.iter().map(|w| (w / total).ln()).collect())
}

/// Entropic transport on a grid; returns the solution together with the
/// final coupling between the discretized source and target.
pub fn solve_grid_entropic_with_plan(
    l: &DensitySpec,
    grid: &GridSpec,
    options: &EntropicOptions,
) -> Result<(TransportSolution, DiscreteCoupling)> {
    solve(l, grid, options, true).map(|(s, c)| (s, c.expect("plan requested")))
}

/// Entropically regularized transport between the discretized Gaussian and
/// `L·μ` on a grid, with ε-annealing, barycentric projection for the map and
/// path integration of `T - I` for the potential.
pub fn solve_grid_entropic(l: &DensitySpec, grid: &GridSpec, options: &EntropicOptions) -> Result<TransportSolution> {
    solve(l, grid, options, false).map(|(s, _)| s)
}

fn solve(
    l: &DensitySpec,
    grid: &GridSpec,
    options: &EntropicOptions,
    keep_plan: bool,
) -> Result<(TransportSolution, Option<DiscreteCoupling>)> {
    if l.dim() != grid.dim {
        return Err(Error::DimensionMismatch {
            expected: grid.dim,
            got: l.dim(),
        });
    }
    validate(options, grid)?;
    let nodes = grid.nodes();
    let m = nodes.len();
    let log_a = normalized_logs(nodes.iter().map(|x| x.iter().map(|v| std_normal_log_pdf(*v)).sum::<f64>().exp()).collect())?;
    let log_b = normalized_logs(
        nodes
            .iter()
            .map(|x| (l.log_density(x) + x.iter().map(|v| std_normal_log_pdf(*v)).sum::<f64>()).exp())
            .collect(),
    )?;

    let omega = options.relaxation;
    let mut sk = Sinkhorn::new(grid);
    let (mut f, mut g) = (vec![0.0; m], vec![0.0; m]);
    let (mut scaled, mut lse) = (vec![0.0; m], vec![0.0; m]);
    let mut iterations = 0usize;
    let stages = options.schedule.len();
    let mut eps = options.schedule[0];
    for (stage, &e) in options.schedule.iter().enumerate() {
        eps = e;
        sk.set_epsilon(eps);
        let last = stage + 1 == stages;
        let tol = if last { options.tolerance } else { 1e-3 };
        let mut residual = f64::INFINITY;
        for _ in 0..options.max_iterations {
            iterations += 1;
            for i in 0..m {
                scaled[i] = f[i] / eps;
            }
            sk.softmin(&scaled, &mut lse);
            for j in 0..m {
                g[j] = if log_b[j] == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    relax(g[j], eps * (log_b[j] - lse[j]), omega)
                };
                scaled[j] = g[j] / eps;
            }
            sk.softmin(&scaled, &mut lse);
            residual = (0..m).map(|i| ((f[i] / eps + lse[i]).exp() - log_a[i].exp()).abs()).sum();
            for i in 0..m {
                f[i] = relax(f[i], eps * (log_a[i] - lse[i]), omega);
            }
            if residual < tol {
                break;
            }
        }
        if last && !(residual < tol) {
            return Err(Error::SinkhornDiverged { iterations, residual });
        }
    }

    for i in 0..m {
        scaled[i] = f[i] / eps;
    }
    sk.softmin(&scaled, &mut lse);
    let column_error: f64 = (0..m)
        .map(|j| {
            let mass = if g[j] == f64::NEG_INFINITY { 0.0 } else { (g[j] / eps + lse[j]).exp() };
            (mass - log_b[j].exp()).abs()
        })
        .sum();

    // Barycentric projections and the coupling.
    let dim = grid.dim;
    let n = grid.points;
    let kernel = &sk.kernel;
    let cost_over_eps = |i: usize, j: usize| -> f64 {
        let (a, b) = (grid.index(i), grid.index(j));
        (0..dim).map(|d| kernel[a[d] * n + b[d]]).sum()
    };
    let mut t_nodes = vec![0.0; m * dim];
    let mut s_acc = vec![0.0; m * dim];
    let mut col_mass = vec![0.0; m];
    let mut plan = keep_plan.then(|| DMatrix::zeros(m, m));
    let mut plan_cost = 0.0;
    for i in 0..m {
        let mut row = 0.0;
        let mut bary = [0.0f64; 2];
        for j in 0..m {
            if g[j] == f64::NEG_INFINITY {
                continue;
            }
            let c = cost_over_eps(i, j);
            let p = ((f[i] + g[j]) / eps - c).exp();
            if p == 0.0 {
                continue;
            }
            row += p;
            for d in 0..dim {
                bary[d] += p * nodes[j][d];
                s_acc[j * dim + d] += p * nodes[i][d];
            }
            col_mass[j] += p;
            plan_cost += p * 2.0 * eps * c;
            if let Some(pl) = plan.as_mut() {
                pl[(i, j)] = p;
            }
        }
        for d in 0..dim {
            t_nodes[i * dim + d] = bary[d] / row;
        }
    }
    let mut s_nodes = vec![0.0; m * dim];
    for j in 0..m {
        for d in 0..dim {
            s_nodes[j * dim + d] = if col_mass[j] > 0.0 { s_acc[j * dim + d] / col_mass[j] } else { nodes[j][d] };
        }
    }

    // The barycentric maps wobble on the scale of a cell; a local affine fit
    // smooths them and supplies their derivatives.
    let raw_disp: Vec<f64> = (0..m * dim).map(|k| t_nodes[k] - nodes[k / dim][k % dim]).collect();
    let raw_back: Vec<f64> = (0..m * dim).map(|k| s_nodes[k] - nodes[k / dim][k % dim]).collect();
    let (disp, phi_hess) = local_affine_fit(grid, &raw_disp);
    let (back, psi_hess) = local_affine_fit(grid, &raw_back);
    let t_nodes: Vec<f64> = (0..m * dim).map(|k| nodes[k / dim][k % dim] + disp[k]).collect();
    let s_nodes: Vec<f64> = (0..m * dim).map(|k| nodes[k / dim][k % dim] + back[k]).collect();
    let cost: f64 = (0..m)
        .map(|i| log_a[i].exp() * (0..dim).map(|d| disp[i * dim + d].powi(2)).sum::<f64>())
        .sum();
    let (phi_nodes, curl) = integrate_potential(grid, &disp);

    let spec = *grid;
    let (pv, tg, ph) = (Arc::new(phi_nodes), Arc::new(t_nodes), Arc::new(phi_hess));
    let phi = ScalarField::from_parts(
        dim,
        Arc::new(move |x| spec.multilinear(&pv, 1, x)[0]),
        Arc::new(move |x| DVector::from_vec(spec.multilinear(&tg, dim, x)) - DVector::from_column_slice(x)),
        Arc::new(move |x| DMatrix::from_vec(dim, dim, spec.multilinear(&ph, dim * dim, x))),
        Differentiation::FiniteDifference { step: grid.spacing() },
    );
    let sn = Arc::new(s_nodes);
    let inverse: VectorMap = Arc::new(move |y| DVector::from_vec(spec.multilinear(&sn, dim, y)));
    let qh = Arc::new(psi_hess);
    let psi = backward_potential(
        &phi,
        inverse.clone(),
        Arc::new(move |y| DMatrix::from_vec(dim, dim, spec.multilinear(&qh, dim * dim, y))),
        Differentiation::FiniteDifference { step: grid.spacing() },
    );

    let solution = TransportSolution::new(phi, psi, inverse, cost, SolverKind::GridEntropic)
        .with_diagnostic("marginal_error", column_error)
        .with_diagnostic("curl_residual", curl)
        .with_diagnostic("plan_cost", plan_cost)
        .with_diagnostic("iterations", iterations as f64)
        .with_diagnostic("final_epsilon", eps);
    let coupling = plan.map(|p| DiscreteCoupling {
        source_atoms: nodes.clone(),
        source_weights: log_a.iter().map(|v| v.exp()).collect(),
        target_atoms: nodes.clone(),
        target_weights: log_b.iter().map(|v| v.exp()).collect(),
        plan: p,
    });
    Ok((solution, coupling))
}

/// Potential at the nodes by trapezoidal integration of the displacement,
/// first along axis 0 through the origin and then along axis 1. The second
/// value is the largest disagreement with the opposite path order over the
/// nodes within three units of the origin.
fn integrate_potential(grid: &GridSpec, disp: &[f64]) -> (Vec<f64>, f64) {
    let n = grid.points;
    let h = grid.spacing();
    let c = n / 2;
    let line = |get: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut out = vec![0.0; n];
        for i in c + 1..n {
            out[i] = out[i - 1] + 0.5 * h * (get(i - 1) + get(i));
        }
        for i in (0..c).rev() {
            out[i] = out[i + 1] - 0.5 * h * (get(i) + get(i + 1));
        }
        out
    };
    if grid.dim == 1 {
        return (line(&|i| disp[i]), 0.0);
    }
    let at = |i0: usize, i1: usize, d: usize| disp[(i0 * n + i1) * 2 + d];
    let spine0 = line(&|i0| at(i0, c, 0));
    let spine1 = line(&|i1| at(c, i1, 1));
    let mut first = vec![0.0; n * n];
    let mut second = vec![0.0; n * n];
    for i0 in 0..n {
        let row = line(&|i1| at(i0, i1, 1));
        for i1 in 0..n {
            first[i0 * n + i1] = spine0[i0] + row[i1] - row[c];
        }
    }
    for i1 in 0..n {
        let col = line(&|i0| at(i0, i1, 0));
        for i0 in 0..n {
            second[i0 * n + i1] = spine1[i1] + col[i0] - col[c];
        }
    }
    let axis = grid.axis();
    let mut curl: f64 = 0.0;
    for i0 in 0..n {
        for i1 in 0..n {
            if axis[i0].abs() <= 3.0 && axis[i1].abs() <= 3.0 {
                curl = curl.max((first[i0 * n + i1] - second[i0 * n + i1]).abs());
            }
        }
    }
    (first, curl)
}

/// Half-width, in nodes, of the patch used to differentiate the map.
const SLOPE_WINDOW: usize = 3;

/// Least-squares affine fit of a node vector field over the patch around
/// each node (clipped at the boundary). Returns the fitted values and the
/// symmetrized Jacobians, the latter column-major per node.
fn local_affine_fit(grid: &GridSpec, field: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = grid.points;
    let h = grid.spacing();
    let dim = grid.dim;
    let m = grid.len();
    let w = SLOPE_WINDOW;
    let mut values = vec![0.0; m * dim];
    let mut out = vec![0.0; m * dim * dim];
    for flat in 0..m {
        let idx = grid.index(flat);
        let range = |d: usize| idx[d].saturating_sub(w)..=(idx[d] + w).min(n - 1);
        let mut patch = Vec::new();
        if dim == 1 {
            patch.extend(range(0).map(|i| (vec![i], i)));
        } else {
            for i in range(0) {
                for j in range(1) {
                    patch.push((vec![i, j], i * n + j));
                }
            }
        }
        let mut normal = DMatrix::<f64>::zeros(dim + 1, dim + 1);
        let mut rhs = DMatrix::<f64>::zeros(dim + 1, dim);
        for (at, node) in &patch {
            let mut row = DVector::from_element(dim + 1, 1.0);
            for d in 0..dim {
                row[d + 1] = (at[d] as f64 - idx[d] as f64) * h;
            }
            normal += &row * row.transpose();
            for c in 0..dim {
                for r in 0..=dim {
                    rhs[(r, c)] += row[r] * field[node * dim + c];
                }
            }
        }
        let coef = normal.lu().solve(&rhs).expect("patch spans every axis");
        for c in 0..dim {
            values[flat * dim + c] = coef[(0, c)];
        }
        let jac = DMatrix::from_fn(dim, dim, |c, e| coef[(e + 1, c)]);
        let sym = (&jac + jac.transpose()) * 0.5;
        out[flat * dim * dim..(flat + 1) * dim * dim].copy_from_slice(sym.as_slice());
    }
    (values, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_map_error(sol: &TransportSolution, grid: &GridSpec, exact: impl Fn(&[f64]) -> DVector<f64>) -> f64 {
        grid.nodes()
            .iter()
            .filter(|x| x.iter().all(|v| v.abs() <= 3.0))
            .map(|x| (sol.forward(x) - exact(x)).norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::new(3, 4.0, 41).is_err());
        assert!(GridSpec::new(1, 2.0, 41).is_err());
        assert!(GridSpec::new(1, 4.0, 40).is_err());
        let g = GridSpec::standard(2).unwrap();
        assert!((g.spacing() - 0.2).abs() < 1e-15);
        assert_eq!(g.len(), 41 * 41);
        let s = g.default_schedule();
        assert!((s[s.len() - 1] - 4e-5).abs() < 1e-18);
        let mut opts = EntropicOptions::for_grid(&g);
        opts.schedule = vec![1.0, 0.1];
        assert!(solve_grid_entropic(&DensitySpec::uniform(2), &g, &opts).is_err());
    }

    #[test]
    fn uniform_target_is_identity() {
        let g = GridSpec::standard(1).unwrap();
        let (sol, plan) = solve_grid_entropic_with_plan(&DensitySpec::uniform(1), &g, &EntropicOptions::for_grid(&g)).unwrap();
        assert!(sol.cost < 1e-4, "{}", sol.cost);
        let (rows, cols) = plan.marginal_errors();
        assert!(rows < 1e-5 && cols < 1e-5, "{rows} {cols}");
        let diag: f64 = (0..g.len()).map(|i| plan.plan[(i, i)]).sum();
        assert!(diag > 0.99);
    }

    #[test]
    fn one_dimensional_gaussian_target() {
        let g = GridSpec::standard(1).unwrap();
        let l = DensitySpec::gaussian_scale(0.5).unwrap();
        let sol = solve_grid_entropic(&l, &g, &EntropicOptions::for_grid(&g)).unwrap();
        let err = max_map_error(&sol, &g, |x| DVector::from_element(1, 0.5 * x[0]));
        assert!(err < 2.0 * g.spacing(), "{err}");
        assert!(sol.diagnostics["marginal_error"] < 1e-5);
        assert!((sol.cost - 0.25).abs() < 0.02, "{}", sol.cost);
    }

    #[test]
    fn two_dimensional_gaussian_target() {
        let g = GridSpec::standard(2).unwrap();
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 0.25]));
        let l = DensitySpec::gaussian_covariance(&sigma).unwrap();
        let sol = solve_grid_entropic(&l, &g, &EntropicOptions::for_grid(&g)).unwrap();
        let err = max_map_error(&sol, &g, |x| DVector::from_column_slice(x) * 0.5);
        assert!(err < 2.0 * g.spacing(), "{err}");
        assert!(sol.diagnostics["marginal_error"] < 1e-5);
        assert!(sol.diagnostics["curl_residual"] < 0.05, "{:?}", sol.diagnostics);
        assert!((sol.cost - 0.5).abs() < 0.04, "{}", sol.cost);
    }
}
