//! Ornstein-Uhlenbeck smoothing and conditioning on the leading coordinates.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::field::ScalarField;
use super::quadrature::gauss_hermite;
use super::space::{tensor_hermite, GaussianSpace};
use crate::error::{check_dim, Error, Result};

struct Nodes {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    /// 0 for nodes on the outermost layer of the tensor grid, 1 for the next;
    /// rules too coarse to compare layers mark every node as interior.
    shell: Vec<usize>,
}

fn nodes(dim: usize, order: usize) -> Nodes {
    let rule = gauss_hermite(order);
    let layer = |v: f64| {
        if order < 6 {
            return usize::MAX;
        }
        let i = rule.nodes.iter().position(|n| *n == v).unwrap_or(0);
        i.min(order - 1 - i)
    };
    let mut out = Nodes {
        points: Vec::new(),
        weights: Vec::new(),
        shell: Vec::new(),
    };
    tensor_hermite(dim, order, |x, w| {
        out.points.push(x.to_vec());
        out.weights.push(w);
        out.shell.push(x.iter().map(|&v| layer(v)).min().unwrap_or(0));
    });
    out
}

/// Sums the weighted values. The integrand is declared to outgrow the
/// Gaussian weight when the outermost layer of nodes carries more absolute
/// mass than the layer inside it.
fn weighted_sum(values: impl Iterator<Item = (f64, f64, usize, Vec<f64>)>) -> Result<f64> {
    let mut acc = 0.0;
    let mut layers = [0.0f64; 2];
    let mut edge: (f64, Option<Vec<f64>>) = (0.0, None);
    for (w, v, shell, node) in values {
        if !v.is_finite() {
            return Err(Error::QuadratureOverflow { node });
        }
        let c = w * v;
        acc += c;
        if shell < 2 {
            layers[shell] += c.abs();
        }
        if shell == 0 && c.abs() > edge.0 {
            edge = (c.abs(), Some(node));
        }
    }
    if layers[0] > layers[1] && layers[0] > 1e-300 {
        return Err(Error::QuadratureOverflow {
            node: edge.1.unwrap_or_default(),
        });
    }
    Ok(acc)
}

/// `P_t g(x) = ∫ g(e^{-t} x + sqrt(1 - e^{-2t}) y) μ(dy)` by tensor
/// Gauss-Hermite quadrature.
pub fn ou_apply(g: &ScalarField, t: f64, x: &[f64], space: &GaussianSpace) -> Result<f64> {
    check_dim(g.dim(), x.len())?;
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("smoothing time must be nonnegative, got {t}")));
    }
    if t == 0.0 {
        return Ok(g.value(x));
    }
    let (a, b) = ou_coefficients(t);
    let q = nodes(g.dim(), space.quadrature_order);
    let mut probe = vec![0.0; x.len()];
    let iter = q.points.iter().zip(&q.weights).zip(&q.shell).map(|((y, &w), &e)| {
        for i in 0..x.len() {
            probe[i] = a * x[i] + b * y[i];
        }
        (w, g.value(&probe), e, probe.clone())
    });
    weighted_sum(iter)
}

fn ou_coefficients(t: f64) -> (f64, f64) {
    let a = (-t).exp();
    (a, (-(-2.0 * t).exp_m1()).sqrt())
}

/// The smoothed field `x ↦ P_t g(x)`, with derivatives obtained by
/// differentiating under the integral. Quadrature failures surface as NaN.
pub fn ou_field(g: &ScalarField, t: f64, space: &GaussianSpace) -> Result<ScalarField> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("smoothing time must be nonnegative, got {t}")));
    }
    if t == 0.0 {
        return Ok(g.clone());
    }
    let dim = g.dim();
    let (a, b) = ou_coefficients(t);
    let q = Arc::new(nodes(dim, space.quadrature_order));
    let shifted = move |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(xi, yi)| a * xi + b * yi).collect() };

    let (gv, qv) = (g.clone(), q.clone());
    let value = move |x: &[f64]| {
        weighted_sum(
            qv.points
                .iter()
                .zip(&qv.weights)
                .zip(&qv.shell)
                .map(|((y, &w), &e)| {
                    let p = shifted(x, y);
                    (w, gv.value(&p), e, p)
                }),
        )
        .unwrap_or(f64::NAN)
    };
    let (gg, qg) = (g.clone(), q.clone());
    let gradient = move |x: &[f64]| {
        let mut acc = DVector::zeros(dim);
        for (y, &w) in qg.points.iter().zip(&qg.weights) {
            acc += gg.gradient(&shifted(x, y)) * w;
        }
        acc * a
    };
    let (gh, qh) = (g.clone(), q);
    let hessian = move |x: &[f64]| {
        let mut acc = DMatrix::zeros(dim, dim);
        for (y, &w) in qh.points.iter().zip(&qh.weights) {
            acc += gh.hessian(&shifted(x, y)) * w;
        }
        acc * (a * a)
    };
    Ok(ScalarField::from_parts(
        dim,
        Arc::new(value),
        Arc::new(gradient),
        Arc::new(hessian),
        g.mode(),
    ))
}

/// `E[g | V_k]`: integrates out coordinates `k..n` and returns a field on `R^k`.
pub fn conditional_projection(g: &ScalarField, keep: usize, space: &GaussianSpace) -> Result<ScalarField> {
    let n = g.dim();
    if keep < 1 || keep > n {
        return Err(Error::InvalidArgument(format!("keep must lie in 1..={n}, got {keep}")));
    }
    if keep == n {
        return Ok(g.clone());
    }
    let q = Arc::new(nodes(n - keep, space.quadrature_order));
    let join = move |y: &[f64], z: &[f64]| -> Vec<f64> { y.iter().chain(z).copied().collect() };

    let (gv, qv) = (g.clone(), q.clone());
    let value = move |y: &[f64]| {
        weighted_sum(
            qv.points
                .iter()
                .zip(&qv.weights)
                .zip(&qv.shell)
                .map(|((z, &w), &e)| {
                    let p = join(y, z);
                    (w, gv.value(&p), e, p)
                }),
        )
        .unwrap_or(f64::NAN)
    };
    let (gg, qg) = (g.clone(), q.clone());
    let gradient = move |y: &[f64]| {
        let mut acc = DVector::zeros(keep);
        for (z, &w) in qg.points.iter().zip(&qg.weights) {
            let full = gg.gradient(&join(y, z));
            acc += full.rows(0, keep) * w;
        }
        acc
    };
    let (gh, qh) = (g.clone(), q);
    let hessian = move |y: &[f64]| {
        let mut acc = DMatrix::zeros(keep, keep);
        for (z, &w) in qh.points.iter().zip(&qh.weights) {
            let full = gh.hessian(&join(y, z));
            acc += full.view((0, 0), (keep, keep)) * w;
        }
        acc
    };
    Ok(ScalarField::from_parts(
        keep,
        Arc::new(value),
        Arc::new(gradient),
        Arc::new(hessian),
        g.mode(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::space::{expect, Method};

    fn x_squared() -> ScalarField {
        ScalarField::quadratic(DMatrix::from_element(1, 1, 2.0), DVector::zeros(1), 0.0)
    }

    #[test]
    fn ou_examples() {
        let s = GaussianSpace::standard(1);
        let id = ScalarField::linear(DVector::from_vec(vec![1.0]));
        let v = ou_apply(&id, 0.7, &[2.0], &s).unwrap();
        assert!((v - (-0.7f64).exp() * 2.0).abs() < 1e-13);
        let v = ou_apply(&x_squared(), 2f64.ln(), &[1.0], &s).unwrap();
        assert!((v - 1.0).abs() < 1e-13);
        let five = ScalarField::constant(1, 5.0);
        assert!((ou_apply(&five, 3.0, &[-4.0], &s).unwrap() - 5.0).abs() < 1e-13);
        assert_eq!(ou_apply(&x_squared(), 0.0, &[3.0], &s).unwrap(), 9.0);
    }

    #[test]
    fn ou_rejects_super_gaussian_growth() {
        let s = GaussianSpace::standard(1);
        let g = ScalarField::finite_difference(1, |x| (x[0] * x[0]).exp());
        assert!(matches!(ou_apply(&g, 1.0, &[0.0], &s), Err(Error::QuadratureOverflow { .. })));
        let h = ScalarField::finite_difference(1, |x| (x[0] * x[0] * x[0]).exp());
        assert!(matches!(ou_apply(&h, 0.5, &[0.0], &s), Err(Error::QuadratureOverflow { .. })));
    }

    #[test]
    fn ou_semigroup_law() {
        let s = GaussianSpace::standard(2);
        let g = ScalarField::finite_difference(2, |x| (x[0] - 0.3 * x[1]).cos() + x[1].powi(4));
        let (ta, tb) = (0.3, 0.45);
        let inner = ou_field(&g, ta, &s).unwrap();
        for x in [[0.0, 0.0], [1.0, -0.5], [-1.5, 2.0]] {
            let twice = ou_apply(&inner, tb, &x, &s.with_quadrature_order(12)).unwrap();
            let once = ou_apply(&g, ta + tb, &x, &s).unwrap();
            assert!((twice - once).abs() < 1e-9, "{twice} vs {once}");
        }
    }

    #[test]
    fn ou_preserves_positivity() {
        let s = GaussianSpace::standard(1);
        let g = ScalarField::finite_difference(1, |x| (x[0] - 1.0).powi(2) * (-x[0].abs()).exp());
        for i in -20..=20 {
            let x = i as f64 * 0.25;
            assert!(ou_apply(&g, 0.2, &[x], &s).unwrap() >= 0.0);
        }
    }

    #[test]
    fn smoothed_field_derivatives() {
        let s = GaussianSpace::standard(1);
        let f = ou_field(&x_squared(), 0.5, &s).unwrap();
        let a = (-1.0f64).exp();
        assert!((f.value(&[2.0]) - (a * 4.0 + 1.0 - a)).abs() < 1e-12);
        assert!((f.gradient(&[2.0])[0] - 4.0 * a).abs() < 1e-12);
        assert!((f.hessian(&[2.0])[(0, 0)] - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        let s = GaussianSpace::standard(2);
        let x1 = ScalarField::linear(DVector::from_vec(vec![1.0, 0.0]));
        let p = conditional_projection(&x1, 1, &s).unwrap();
        assert_eq!(p.dim(), 1);
        assert!((p.value(&[0.7]) - 0.7).abs() < 1e-14);

        let x2sq = ScalarField::quadratic(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]), DVector::zeros(2), 0.0);
        let p = conditional_projection(&x2sq, 1, &s).unwrap();
        for y in [-2.0, 0.0, 3.0] {
            assert!((p.value(&[y]) - 1.0).abs() < 1e-12);
        }

        let mixed = ScalarField::quadratic(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 0.0]), DVector::zeros(2), 0.0);
        let p = conditional_projection(&mixed, 1, &s).unwrap();
        for y in [-1.5, 0.4, 2.0] {
            assert!((p.value(&[y]) - y * y).abs() < 1e-12);
            assert!((p.gradient(&[y])[0] - 2.0 * y).abs() < 1e-12);
            assert!((p.hessian(&[y])[(0, 0)] - 2.0).abs() < 1e-12);
        }

        let same = conditional_projection(&mixed, 2, &s).unwrap();
        assert_eq!(same.value(&[0.3, 0.2]), mixed.value(&[0.3, 0.2]));
        assert!(conditional_projection(&mixed, 0, &s).is_err());
        assert!(conditional_projection(&mixed, 3, &s).is_err());
    }

    #[test]
    fn tower_property() {
        let s = GaussianSpace::standard(3).with_quadrature_order(10);
        let g = ScalarField::finite_difference(3, |x| (x[0] + 0.5 * x[1]).sin().powi(2) + x[2] * x[2] * x[0].abs());
        let full = expect(|x| g.value(x), &s, Method::Quadrature).unwrap().mean;
        for k in 1..=3 {
            let p = conditional_projection(&g, k, &s).unwrap();
            let sk = s.with_dim(k);
            let proj = expect(|y| p.value(y), &sk, Method::Quadrature).unwrap().mean;
            assert!((proj - full).abs() < 1e-12, "k={k}: {proj} vs {full}");
        }
    }
}
