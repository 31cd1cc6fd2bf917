use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector};

use super::solution::{backward_potential, SolverKind, TransportSolution, VectorMap};
use crate::error::{Error, Result};
use crate::gaussian::quadrature::integrate;
use crate::gaussian::{expect, DensitySpec, Differentiation, GaussianSpace, Method, ScalarField};
use crate::stats::{
    std_normal_cdf, std_normal_log_pdf, std_normal_quantile, std_normal_quantile_upper, std_normal_sf,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cdf1dOptions {
    /// Half-width of the finely paneled part of the table; one wide panel
    /// extends it on each side.
    pub radius: f64,
    pub panels: usize,
    /// Allowed `|∫ L dμ - 1|` before the density is rejected as unnormalized.
    pub normalization_tol: f64,
}

impl Default for Cdf1dOptions {
    fn default() -> Self {
        Self {
            radius: 10.0,
            panels: 400,
            normalization_tol: 1e-6,
        }
    }
}

const PANEL_TOL: f64 = 1e-16;
/// Width of the single outer panel on each side of the table.
const TAIL_WIDTH: f64 = 10.0;

/// Cumulative mass of the target `p = L γ` on a table of knots.
struct CdfTable {
    density: DensitySpec,
    knots: Vec<f64>,
    /// Mass on `(-∞, knots[i]]`.
    left: Vec<f64>,
    /// Mass on `[knots[i], ∞)`.
    right: Vec<f64>,
    total: f64,
}

impl CdfTable {
    fn build(density: DensitySpec, opts: &Cdf1dOptions) -> Result<Self> {
        if !(opts.radius > 0.0) || opts.panels < 2 {
            return Err(Error::InvalidArgument("CDF table needs a positive radius and at least two panels".into()));
        }
        let r = opts.radius;
        let mut knots = vec![-r - TAIL_WIDTH];
        knots.extend((0..=opts.panels).map(|i| -r + 2.0 * r * i as f64 / opts.panels as f64));
        knots.push(r + TAIL_WIDTH);
        let n = knots.len() - 1;
        let mut table = Self {
            density,
            knots,
            left: vec![0.0; n + 1],
            right: vec![0.0; n + 1],
            total: 0.0,
        };
        let pieces: Vec<f64> = (0..n)
            .map(|i| integrate(|y| table.p(y), table.knots[i], table.knots[i + 1], PANEL_TOL))
            .collect();
        if let Some(bad) = pieces.iter().position(|v| !v.is_finite()) {
            return Err(Error::NotIntegrable(format!("target density is not integrable near {}", table.knots[bad])));
        }
        for i in 0..n {
            table.left[i + 1] = table.left[i] + pieces[i];
            table.right[n - 1 - i] = table.right[n - i] + pieces[n - 1 - i];
        }
        table.total = table.left[n];
        if !(table.total > 0.0) {
            return Err(Error::NotIntegrable("target density has zero mass on the table".into()));
        }
        Ok(table)
    }

    fn radius(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    fn log_p(&self, y: f64) -> f64 {
        self.density.log_density(&[y]) + std_normal_log_pdf(y)
    }

    fn p(&self, y: f64) -> f64 {
        self.log_p(y).exp()
    }

    fn panel(&self, y: f64) -> usize {
        let i = self.knots.partition_point(|k| *k <= y);
        i.saturating_sub(1).min(self.knots.len() - 2)
    }

    fn left_mass(&self, y: f64) -> f64 {
        let i = self.panel(y);
        self.left[i] + integrate(|u| self.p(u), self.knots[i], y, PANEL_TOL)
    }

    fn right_mass(&self, y: f64) -> f64 {
        let i = self.panel(y);
        self.right[i + 1] + integrate(|u| self.p(u), y, self.knots[i + 1], PANEL_TOL)
    }

    /// Solves `mass(y) = target` where `mass` is the left (increasing) or right
    /// (decreasing) cumulative mass, by safeguarded Newton iteration.
    fn invert(&self, target: f64, from_left: bool) -> f64 {
        let r = self.radius();
        let n = self.knots.len() - 1;
        let (cum, mass): (&[f64], fn(&Self, f64) -> f64) = if from_left {
            (&self.left, Self::left_mass)
        } else {
            (&self.right, Self::right_mass)
        };
        if target <= cum[if from_left { 0 } else { n }] {
            warn!("quantile below the table range; clamping to the table edge");
            return if from_left { -r } else { r };
        }
        if target >= cum[if from_left { n } else { 0 }] {
            warn!("quantile beyond the table range; clamping to the table edge");
            return if from_left { r } else { -r };
        }
        let i = if from_left {
            cum.partition_point(|c| *c < target).max(1) - 1
        } else {
            cum.partition_point(|c| *c >= target).max(1) - 1
        };
        let (mut lo, mut hi) = (self.knots[i], self.knots[i + 1]);
        let sign = if from_left { 1.0 } else { -1.0 };
        let mut y = 0.5 * (lo + hi);
        for _ in 0..200 {
            let residual = sign * (mass(self, y) - target);
            if residual == 0.0 {
                break;
            }
            if residual > 0.0 {
                hi = y;
            } else {
                lo = y;
            }
            let slope = self.p(y);
            let mut next = y - residual / slope;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            let done = (next - y).abs() <= 1e-15 * (1.0 + y.abs()) || hi - lo <= 1e-15 * (1.0 + y.abs());
            y = next;
            if done {
                break;
            }
        }
        y
    }

    /// `T(x) = F⁻¹(Z Φ(x))`, computed from the nearer tail.
    fn forward(&self, x: f64) -> f64 {
        if x <= 0.0 {
            self.invert(self.total * std_normal_cdf(x), true)
        } else {
            self.invert(self.total * std_normal_sf(x), false)
        }
    }

    /// `T'(x) = Z γ(x) / p(T(x))`; zero where `T` is clamped.
    fn forward_derivative(&self, x: f64, t: f64) -> f64 {
        let r = self.radius();
        if t <= -r || t >= r {
            return 0.0;
        }
        (std_normal_log_pdf(x) + self.total.ln() - self.log_p(t)).exp()
    }

    fn inverse(&self, y: f64) -> f64 {
        let r = self.radius();
        if y <= -r {
            return f64::NEG_INFINITY;
        }
        if y >= r {
            return f64::INFINITY;
        }
        let lower = self.left_mass(y) / self.total;
        if lower <= 0.5 {
            std_normal_quantile(lower)
        } else {
            std_normal_quantile_upper(self.right_mass(y) / self.total)
        }
    }

    fn inverse_derivative(&self, y: f64, s: f64) -> f64 {
        if !s.is_finite() {
            return 0.0;
        }
        (self.log_p(y) - self.total.ln() - std_normal_log_pdf(s)).exp()
    }
}

/// One-dimensional transport by monotone rearrangement `T = F⁻¹∘Φ`, where
/// `F` is the distribution function of `L·μ`.
pub fn solve_1d(l: &DensitySpec, opts: &Cdf1dOptions) -> Result<TransportSolution> {
    if l.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: l.dim(),
        });
    }
    let table = Arc::new(CdfTable::build(l.clone(), opts)?);
    if (table.total - 1.0).abs() > opts.normalization_tol {
        return Err(Error::Unnormalized { mean: table.total });
    }

    let (tv, tg, th) = (table.clone(), table.clone(), table.clone());
    let value = move |x: &[f64]| {
        let x = x[0];
        integrate(|u| tv.forward(u) - u, 0.0, x, 1e-13)
    };
    let gradient = move |x: &[f64]| DVector::from_element(1, tg.forward(x[0]) - x[0]);
    let hessian = move |x: &[f64]| {
        let t = th.forward(x[0]);
        DMatrix::from_element(1, 1, th.forward_derivative(x[0], t) - 1.0)
    };
    let phi = ScalarField::from_parts(
        1,
        Arc::new(value),
        Arc::new(gradient),
        Arc::new(hessian),
        Differentiation::ClosedForm,
    );

    let ti = table.clone();
    let inverse: VectorMap = Arc::new(move |y: &[f64]| DVector::from_element(1, ti.inverse(y[0])));
    let tih = table.clone();
    let psi_hessian = Arc::new(move |y: &[f64]| {
        let s = tih.inverse(y[0]);
        DMatrix::from_element(1, 1, tih.inverse_derivative(y[0], s) - 1.0)
    });
    let psi = backward_potential(&phi, inverse.clone(), psi_hessian, Differentiation::ClosedForm);

    let space = GaussianSpace::standard(1).with_quadrature_order(64);
    let tc = table.clone();
    let cost = expect(|x| (tc.forward(x[0]) - x[0]).powi(2), &space, Method::Quadrature)?.mean;

    let td = table.clone();
    let derivative = Arc::new(move |x: &[f64]| {
        let t = td.forward(x[0]);
        DMatrix::from_element(1, 1, td.forward_derivative(x[0], t))
    });
    Ok(TransportSolution::new(phi, psi, inverse, cost, SolverKind::Cdf1d)
        .with_derivative(derivative)
        .with_diagnostic("table_mass", table.total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{box_grid, check_one_convex};

    fn solve(l: &DensitySpec) -> TransportSolution {
        solve_1d(l, &Cdf1dOptions::default()).unwrap()
    }

    #[test]
    fn uniform_gives_identity() {
        let sol = solve(&DensitySpec::uniform(1));
        for x in [-3.0, -0.2, 0.0, 1.7] {
            assert!((sol.forward(&[x])[0] - x).abs() < 1e-10);
            assert!(sol.phi.value(&[x]).abs() < 1e-10);
        }
        assert!(sol.cost < 1e-18);
    }

    #[test]
    fn gaussian_scale_closed_form() {
        let sol = solve(&DensitySpec::gaussian_scale(0.5).unwrap());
        for x in [-4.0, -1.0, 0.0, 0.3, 2.5, 6.0] {
            assert!((sol.forward(&[x])[0] - 0.5 * x).abs() < 1e-10, "T({x})");
            assert!((sol.phi.value(&[x]) + x * x / 4.0).abs() < 1e-10);
            assert!((sol.phi.hessian(&[x])[(0, 0)] + 0.5).abs() < 1e-9);
        }
        assert!((sol.cost - 0.25).abs() < 1e-10);
    }

    #[test]
    fn mean_shift_closed_form() {
        let sol = solve(&DensitySpec::gaussian_shift(1.0).unwrap());
        for x in [-3.0, 0.0, 1.5, 4.0] {
            assert!((sol.forward(&[x])[0] - x - 1.0).abs() < 1e-10);
        }
        assert!((sol.cost - 1.0).abs() < 1e-10);
    }

    #[test]
    fn map_is_monotone_and_one_convex() {
        let l = DensitySpec::box_indicator(&[(-1.0, 1.0)]).unwrap();
        let sol = solve(&l);
        let xs: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.1).collect();
        let ts: Vec<f64> = xs.iter().map(|&x| sol.forward(&[x])[0]).collect();
        assert!(ts.windows(2).all(|w| w[1] >= w[0]));
        assert!(ts.iter().all(|t| t.abs() <= 1.0));
        assert!(check_one_convex(&sol.phi, &box_grid(1, 4.0, 41)).unwrap().holds);
    }

    #[test]
    fn derivative_matches_differences() {
        let sol = solve(&DensitySpec::box_indicator(&[(0.0, f64::INFINITY)]).unwrap());
        for x in [-1.0f64, 0.0, 0.8] {
            let h = 1e-5;
            let fd = (sol.forward(&[x + h])[0] - sol.forward(&[x - h])[0]) / (2.0 * h);
            let exact = sol.phi.hessian(&[x])[(0, 0)] + 1.0;
            assert!((fd - exact).abs() < 1e-6 * (1.0 + exact), "{fd} vs {exact}");
        }
    }

    #[test]
    fn inverse_and_backward_potential() {
        let sol = solve(&DensitySpec::gaussian_scale(0.5).unwrap());
        let xs: Vec<Vec<f64>> = (-30..=30).map(|i| vec![i as f64 * 0.2]).collect();
        assert!(sol.inversion_error(&xs) < 1e-9);
        for y in [-1.0f64, 0.2, 1.4] {
            assert!((sol.psi.value(&[y]) - y * y / 2.0).abs() < 1e-9);
            assert!((sol.psi.gradient(&[y])[0] - y).abs() < 1e-9);
            assert!((sol.psi.hessian(&[y])[(0, 0)] - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_wrong_inputs() {
        let bad = DensitySpec::new(ScalarField::zero(1), 0.5, None, true).unwrap();
        assert!(matches!(solve_1d(&bad, &Cdf1dOptions::default()), Err(Error::Unnormalized { .. })));
        let two = DensitySpec::uniform(2);
        assert!(solve_1d(&two, &Cdf1dOptions::default()).is_err());
    }
}
