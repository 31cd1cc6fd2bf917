use std::collections::HashMap;
use std::sync::Mutex;

use nalgebra::DVector;

use super::grid::{solve_grid_entropic, EntropicOptions, GridSpec};
use super::one_d::{solve_1d, Cdf1dOptions};
use super::solution::TransportSolution;
use crate::error::{Error, Result};
use crate::gaussian::{conditional_projection, expect, ou_field, relative_entropy, DensitySpec, GaussianSpace, Method};
use crate::stats::MeanEstimate;

#[derive(Debug, Clone)]
pub struct LadderOptions {
    /// Quadrature order used to build the smoothed, projected densities.
    pub density_order: usize,
    /// Quadrature order of the `L²(μ)` gradient error and entropies.
    pub error_order: usize,
    pub cdf: Cdf1dOptions,
    pub grid_radius: f64,
    pub grid_points: usize,
}

impl Default for LadderOptions {
    fn default() -> Self {
        Self {
            density_order: 32,
            error_order: 20,
            cdf: Cdf1dOptions {
                radius: 8.0,
                panels: 200,
                normalization_tol: 1e-5,
            },
            grid_radius: 4.0,
            grid_points: 41,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LadderRung {
    pub k: usize,
    pub density: DensitySpec,
    pub solution: TransportSolution,
    /// `‖∇φ_k - ∇φ‖` in `L²(μ)`, with `∇φ_k` extended by zero.
    pub gradient_error: MeanEstimate,
    /// `E[L_k log L_k]`.
    pub entropy: f64,
}

#[derive(Debug, Clone)]
pub struct LadderReport {
    pub rungs: Vec<LadderRung>,
    /// `E[L log L]` of the full density.
    pub entropy: f64,
}

impl LadderReport {
    /// Errors do not increase by more than `sigmas` combined standard errors.
    pub fn errors_nonincreasing(&self, sigmas: f64) -> bool {
        self.rungs.windows(2).all(|w| {
            let (a, b) = (&w[0].gradient_error, &w[1].gradient_error);
            b.mean <= a.mean + sigmas * a.std_error.hypot(b.std_error)
        })
    }

    pub fn entropy_below_full(&self, tol: f64) -> bool {
        self.rungs.iter().all(|r| r.entropy <= self.entropy + tol)
    }
}

/// `L_k = E[P_{1/k} L | V_k]`. The semigroup acts coordinatewise, so this
/// equals `P_{1/k}` applied on `R^k` to `E[L | V_k]`, which is how it is
/// evaluated.
pub fn ladder_density(l: &DensitySpec, k: usize, order: usize) -> Result<DensitySpec> {
    let n = l.dim();
    if k < 1 || k > n {
        return Err(Error::InvalidArgument(format!("rung dimension must lie in 1..={n}, got {k}")));
    }
    let space = GaussianSpace::standard(n).with_quadrature_order(order);
    let projected = conditional_projection(&l.density_field(), k, &space)?;
    let smoothed = ou_field(&projected, 1.0 / k as f64, &space.with_dim(k))?;
    Ok(DensitySpec::from_density_field(smoothed, l.is_h_convex))
}

/// Solves the transport problem for each `L_k` and compares the gradients
/// with the reference potential of `L`.
pub fn approximation_ladder(
    l: &DensitySpec,
    reference: &TransportSolution,
    dims: &[usize],
    options: &LadderOptions,
) -> Result<LadderReport> {
    let n = l.dim();
    if reference.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: reference.dim(),
        });
    }
    let full_space = GaussianSpace::standard(n).with_quadrature_order(options.error_order);
    let entropy = relative_entropy(l, &full_space, Method::Quadrature)?.mean;
    let mut rungs = Vec::with_capacity(dims.len());
    for &k in dims {
        let density = ladder_density(l, k, options.density_order)?;
        let solution = match k {
            1 => solve_1d(&density, &options.cdf)?,
            2 => {
                let grid = GridSpec::new(2, options.grid_radius, options.grid_points)?;
                solve_grid_entropic(&density, &grid, &EntropicOptions::for_grid(&grid))?
            }
            _ => return Err(Error::Unsupported(format!("no transport solver for rung dimension {k}"))),
        };
        let cache: Mutex<HashMap<Vec<u64>, DVector<f64>>> = Mutex::new(HashMap::new());
        let rung_gradient = |y: &[f64]| {
            let key: Vec<u64> = y.iter().map(|v| v.to_bits()).collect();
            if let Some(g) = cache.lock().expect("gradient cache").get(&key) {
                return g.clone();
            }
            let g = solution.phi.gradient(y);
            cache.lock().expect("gradient cache").insert(key, g.clone());
            g
        };
        let sq = expect(
            |x| {
                let g = rung_gradient(&x[..k]);
                let r = reference.phi.gradient(x);
                (0..n)
                    .map(|i| (if i < k { g[i] } else { 0.0 } - r[i]).powi(2))
                    .sum::<f64>()
            },
            &full_space,
            Method::Quadrature,
        )?;
        let root = sq.mean.max(0.0).sqrt();
        let gradient_error = MeanEstimate {
            mean: root,
            std_error: if root > 0.0 { sq.std_error / (2.0 * root) } else { sq.std_error.sqrt() },
        };
        let k_space = GaussianSpace::standard(k).with_quadrature_order(options.error_order);
        let rung_entropy = relative_entropy(&density, &k_space, Method::Quadrature)?.mean;
        rungs.push(LadderRung {
            k,
            density,
            solution,
            gradient_error,
            entropy: rung_entropy,
        });
    }
    Ok(LadderReport { rungs, entropy })
}
