use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

pub type ValueFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;
pub type HessianFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// Relative central-difference step for first derivatives.
pub const FD_STEP: f64 = 1e-5;
/// Relative step for second differences of the value alone (about eps^(1/4)).
const FD_SECOND_STEP: f64 = 1.2e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Differentiation {
    ClosedForm,
    /// Central differences with step `step * max(1, |x|)`.
    FiniteDifference { step: f64 },
}

/// A scalar function on `R^n` with gradient and Hessian oracles.
///
/// Missing derivative oracles are filled in with central differences; the
/// Hessian is always returned symmetrized.
#[derive(Clone)]
pub struct ScalarField {
    dim: usize,
    value: ValueFn,
    gradient: Option<GradientFn>,
    hessian: Option<HessianFn>,
    mode: Differentiation,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField")
            .field("dim", &self.dim)
            .field("mode", &self.mode)
            .finish()
    }
}

impl ScalarField {
    pub fn new<V, G, H>(dim: usize, value: V, gradient: G, hessian: H) -> Self
    where
        V: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static,
        H: Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self {
            dim,
            value: Arc::new(value),
            gradient: Some(Arc::new(gradient)),
            hessian: Some(Arc::new(hessian)),
            mode: Differentiation::ClosedForm,
        }
    }

    /// Assembles a field from explicit oracles, keeping the stated mode.
    pub fn from_parts(
        dim: usize,
        value: ValueFn,
        gradient: GradientFn,
        hessian: HessianFn,
        mode: Differentiation,
    ) -> Self {
        Self {
            dim,
            value,
            gradient: Some(gradient),
            hessian: Some(hessian),
            mode,
        }
    }

    pub fn finite_difference<V>(dim: usize, value: V) -> Self
    where
        V: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            dim,
            value: Arc::new(value),
            gradient: None,
            hessian: None,
            mode: Differentiation::FiniteDifference { step: FD_STEP },
        }
    }

    /// Closed-form gradient; the Hessian is differenced from it.
    pub fn with_gradient<V, G>(dim: usize, value: V, gradient: G) -> Self
    where
        V: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            dim,
            value: Arc::new(value),
            gradient: Some(Arc::new(gradient)),
            hessian: None,
            mode: Differentiation::FiniteDifference { step: FD_STEP },
        }
    }

    /// `x ↦ ½ xᵀAx + b·x + c` with `A` symmetrized.
    pub fn quadratic(a: DMatrix<f64>, b: DVector<f64>, c: f64) -> Self {
        assert!(a.is_square() && a.nrows() == b.len(), "quadratic: shape mismatch");
        let dim = b.len();
        let a = (&a + a.transpose()) * 0.5;
        let (a1, b1) = (a.clone(), b.clone());
        let (a2, b2) = (a.clone(), b);
        Self::new(
            dim,
            move |x| {
                let x = DVector::from_column_slice(x);
                0.5 * x.dot(&(&a1 * &x)) + b1.dot(&x) + c
            },
            move |x| &a2 * DVector::from_column_slice(x) + &b2,
            move |_| a.clone(),
        )
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        Self::new(
            dim,
            move |_| c,
            move |_| DVector::zeros(dim),
            move |_| DMatrix::zeros(dim, dim),
        )
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant(dim, 0.0)
    }

    /// `x ↦ h·x`.
    pub fn linear(h: DVector<f64>) -> Self {
        Self::quadratic(DMatrix::zeros(h.len(), h.len()), h, 0.0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> Differentiation {
        self.mode
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        (self.value)(x)
    }

    pub fn gradient(&self, x: &[f64]) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.dim);
        match &self.gradient {
            Some(g) => g(x),
            None => central_gradient(&*self.value, x, self.step()),
        }
    }

    pub fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        debug_assert_eq!(x.len(), self.dim);
        let h = match (&self.hessian, &self.gradient) {
            (Some(h), _) => h(x),
            (None, Some(g)) => jacobian_of(&**g, x, self.step()),
            (None, None) => second_differences(&*self.value, x),
        };
        symmetrize(h)
    }

    /// Returns a field `x ↦ scale * self(x) + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> ScalarField {
        let base = self.clone();
        let (b1, b2, b3) = (base.clone(), base.clone(), base);
        let mut out = ScalarField {
            dim: self.dim,
            value: Arc::new(move |x| scale * b1.value(x) + shift),
            gradient: Some(Arc::new(move |x| b2.gradient(x) * scale)),
            hessian: Some(Arc::new(move |x| b3.hessian(x) * scale)),
            mode: self.mode,
        };
        if self.gradient.is_none() {
            out.gradient = None;
            out.hessian = None;
            let b = self.clone();
            out.value = Arc::new(move |x| scale * b.value(x) + shift);
        }
        out
    }

    fn step(&self) -> f64 {
        match self.mode {
            Differentiation::FiniteDifference { step } => step,
            Differentiation::ClosedForm => FD_STEP,
        }
    }
}

fn relative_step(step: f64, x: &[f64]) -> f64 {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    step * norm.max(1.0)
}

fn central_gradient(f: &(dyn Fn(&[f64]) -> f64 + Send + Sync), x: &[f64], step: f64) -> DVector<f64> {
    let h = relative_step(step, x);
    let mut probe = x.to_vec();
    DVector::from_fn(x.len(), |i, _| {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        (up - down) / (2.0 * h)
    })
}

fn jacobian_of(
    g: &(dyn Fn(&[f64]) -> DVector<f64> + Send + Sync),
    x: &[f64],
    step: f64,
) -> DMatrix<f64> {
    let n = x.len();
    let h = relative_step(step, x);
    let mut probe = x.to_vec();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        probe[j] = x[j] + h;
        let up = g(&probe);
        probe[j] = x[j] - h;
        let down = g(&probe);
        probe[j] = x[j];
        jac.set_column(j, &((up - down) / (2.0 * h)));
    }
    jac
}

fn second_differences(f: &(dyn Fn(&[f64]) -> f64 + Send + Sync), x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let h = relative_step(FD_SECOND_STEP, x);
    let f0 = f(x);
    let mut probe = x.to_vec();
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        hess[(i, i)] = (up - 2.0 * f0 + down) / (h * h);
        for j in 0..i {
            let mut corner = |si: f64, sj: f64| {
                probe[i] = x[i] + si * h;
                probe[j] = x[j] + sj * h;
                let v = f(&probe);
                probe[i] = x[i];
                probe[j] = x[j];
                v
            };
            let mixed = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0)
                + corner(-1.0, -1.0))
                / (4.0 * h * h);
            hess[(i, j)] = mixed;
            hess[(j, i)] = mixed;
        }
    }
    hess
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock() -> ScalarField {
        ScalarField::finite_difference(2, |x| (1.0 - x[0]).powi(2) + 10.0 * (x[1] - x[0] * x[0]).powi(2))
    }

    #[test]
    fn quadratic_oracles() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 4.0]);
        let f = ScalarField::quadratic(a, DVector::from_vec(vec![1.0, -1.0]), 3.0);
        let x = [1.0, 2.0];
        // symmetrized A = [[2, .5], [.5, 4]]
        assert!((f.value(&x) - (0.5 * (2.0 + 2.0 * 0.5 * 2.0 + 4.0 * 4.0) + 1.0 - 2.0 + 3.0)).abs() < 1e-12);
        let g = f.gradient(&x);
        assert!((g[0] - 4.0).abs() < 1e-12 && (g[1] - 7.5).abs() < 1e-12);
        assert_eq!(f.hessian(&x)[(0, 1)], 0.5);
    }

    #[test]
    fn finite_difference_matches_analytic() {
        let f = rosenbrock();
        let x = [0.3, -0.7];
        let g = f.gradient(&x);
        let gx = -2.0 * (1.0 - x[0]) - 40.0 * x[0] * (x[1] - x[0] * x[0]);
        let gy = 20.0 * (x[1] - x[0] * x[0]);
        assert!((g[0] - gx).abs() < 1e-8);
        assert!((g[1] - gy).abs() < 1e-8);
        let h = f.hessian(&x);
        let hxx = 2.0 - 40.0 * (x[1] - 3.0 * x[0] * x[0]);
        assert!((h[(0, 0)] - hxx).abs() < 1e-5);
        assert!((h[(0, 1)] + 40.0 * x[0]).abs() < 1e-5);
        assert!((h[(1, 1)] - 20.0).abs() < 1e-5);
        assert_eq!(h[(0, 1)], h[(1, 0)]);
    }

    #[test]
    fn hessian_from_gradient_is_symmetric() {
        let f = ScalarField::with_gradient(
            2,
            |x| (x[0] * x[1]).sin(),
            |x| {
                let c = (x[0] * x[1]).cos();
                DVector::from_vec(vec![x[1] * c, x[0] * c])
            },
        );
        let h = f.hessian(&[0.4, 1.3]);
        assert!((h[(0, 1)] - h[(1, 0)]).abs() <= 1e-10 * h.norm());
    }

    #[test]
    fn affine_scales_derivatives() {
        let f = ScalarField::quadratic(DMatrix::identity(1, 1), DVector::zeros(1), 0.0).affine(-2.0, 1.0);
        assert_eq!(f.value(&[3.0]), -8.0);
        assert_eq!(f.gradient(&[3.0])[0], -6.0);
        assert_eq!(f.hessian(&[3.0])[(0, 0)], -2.0);
    }
}
