//! One-dimensional quadrature rules built by the Golub-Welsch method.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};

#[derive(Debug, Clone)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn golub_welsch(order: usize, off_diagonal: impl Fn(usize) -> f64, mass: f64) -> Rule {
    let mut jacobi = DMatrix::zeros(order, order);
    for k in 1..order {
        let b = off_diagonal(k);
        jacobi[(k, k - 1)] = b;
        jacobi[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], mass * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Enforce the exact symmetry of both rules.
    let n = pairs.len();
    for i in 0..n / 2 {
        let x = 0.5 * (pairs[n - 1 - i].0 - pairs[i].0);
        let w = 0.5 * (pairs[n - 1 - i].1 + pairs[i].1);
        pairs[i] = (-x, w);
        pairs[n - 1 - i] = (x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    Rule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1 * mass / total).collect(),
    }
}

type Cache = Mutex<HashMap<usize, Arc<Rule>>>;

fn cached(cache: &'static OnceLock<Cache>, order: usize, build: impl FnOnce() -> Rule) -> Arc<Rule> {
    let map = cache.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(rule) = map.lock().expect("quadrature cache poisoned").get(&order) {
        return rule.clone();
    }
    let rule = Arc::new(build());
    map.lock()
        .expect("quadrature cache poisoned")
        .entry(order)
        .or_insert(rule)
        .clone()
}

/// Gauss-Hermite rule for the standard normal weight; weights sum to one.
pub fn gauss_hermite(order: usize) -> Arc<Rule> {
    static CACHE: OnceLock<Cache> = OnceLock::new();
    assert!(order >= 1);
    cached(&CACHE, order, || golub_welsch(order, |k| (k as f64).sqrt(), 1.0))
}

/// Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(order: usize) -> Arc<Rule> {
    static CACHE: OnceLock<Cache> = OnceLock::new();
    assert!(order >= 1);
    cached(&CACHE, order, || {
        golub_welsch(
            order,
            |k| {
                let k = k as f64;
                k / (4.0 * k * k - 1.0).sqrt()
            },
            2.0,
        )
    })
}

/// Returns the panel estimate and the estimate of `∫|f|`.
fn legendre_panel(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64, rule: &Rule) -> (f64, f64) {
    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
    let (mut sum, mut abs) = (0.0, 0.0);
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        let v = w * f(mid + half * x);
        sum += v;
        abs += v.abs();
    }
    (sum * half, abs * half.abs())
}

const MAX_DEPTH: usize = 48;
const MAX_PANELS: usize = 4000;

/// Adaptive Gauss-Legendre integration of `f` over `[a, b]`.
///
/// A panel is accepted once its two halves agree with the whole to a share
/// of `abs_tol` proportional to its width, or to a rounding floor relative to
/// `∫|f|` over the panel. Depth and the total number of panels are capped.
pub fn integrate(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, abs_tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let rule = gauss_legendre(10);
    let width = (b - a).abs();
    let mut stack = vec![(a, b, legendre_panel(&mut f, a, b, &rule).0, 0usize)];
    let mut total = 0.0;
    let mut panels = 0usize;
    while let Some((lo, hi, whole, depth)) = stack.pop() {
        let m = 0.5 * (lo + hi);
        let (left, left_abs) = legendre_panel(&mut f, lo, m, &rule);
        let (right, right_abs) = legendre_panel(&mut f, m, hi, &rule);
        panels += 1;
        let split = left + right;
        let tol = (abs_tol * (hi - lo).abs() / width).max(64.0 * f64::EPSILON * (left_abs + right_abs));
        if depth >= MAX_DEPTH || panels >= MAX_PANELS || (split - whole).abs() <= tol || !split.is_finite() {
            total += split;
        } else {
            stack.push((m, hi, right, depth + 1));
            stack.push((lo, m, left, depth + 1));
        }
    }
    total
}
