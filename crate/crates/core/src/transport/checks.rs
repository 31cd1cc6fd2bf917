use nalgebra::DVector;

use super::solution::TransportSolution;
use crate::error::{Error, Result};
use crate::gaussian::{standard_normal_samples, DensitySpec};
use crate::stats::{ks_critical, weighted_ks_two_sample};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CyclicReport {
    pub holds: bool,
    /// Largest cycle sum `Σ (T(u_i), u_{i+1} - u_i)`; nonpositive when the
    /// map is cyclically monotone on the tested cycles.
    pub worst_slack: f64,
}

/// Tests `Σ_i (T(u_i), u_{i+1} - u_i) ≤ tol` on closed cycles (the last
/// point connects back to the first).
pub fn check_cyclic_monotonicity<F>(map: F, cycles: &[Vec<Vec<f64>>], tol: f64) -> CyclicReport
where
    F: Fn(&[f64]) -> DVector<f64>,
{
    let mut worst = f64::NEG_INFINITY;
    for cycle in cycles {
        let k = cycle.len();
        let sum: f64 = (0..k)
            .map(|i| {
                let next = &cycle[(i + 1) % k];
                let step = DVector::from_column_slice(next) - DVector::from_column_slice(&cycle[i]);
                map(&cycle[i]).dot(&step)
            })
            .sum();
        worst = worst.max(sum);
    }
    CyclicReport {
        holds: worst <= tol,
        worst_slack: worst,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualityReport {
    /// `max |φ(x) + ψ(T(x)) + ½|x - T(x)|²|` over the coupled sample.
    pub on_graph_max: f64,
    /// `min φ(x) + ψ(y) + ½|x - y|²` over the independent probe pairs.
    pub off_graph_min: f64,
}

impl DualityReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.on_graph_max <= tol && self.off_graph_min >= -tol
    }
}

pub fn duality_gap(solution: &TransportSolution, sample: &[Vec<f64>], probe: &[(Vec<f64>, Vec<f64>)]) -> DualityReport {
    let pair = |x: &[f64], y: &[f64]| {
        let d: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
        solution.phi.value(x) + solution.psi.value(y) + 0.5 * d
    };
    let on_graph_max = sample
        .iter()
        .map(|x| {
            let t = solution.forward(x);
            pair(x, t.as_slice()).abs()
        })
        .fold(0.0, f64::max);
    let off_graph_min = probe
        .iter()
        .map(|(x, y)| pair(x, y))
        .fold(f64::INFINITY, f64::min);
    DualityReport {
        on_graph_max,
        off_graph_min,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsReport {
    pub statistic: f64,
    pub effective_size: f64,
    pub critical: f64,
}

impl KsReport {
    pub fn passes(&self) -> bool {
        self.statistic < self.critical
    }
}

/// Compares one coordinate of `T(x)`, `x ~ μ`, with the same coordinate of
/// `L·μ`, the latter represented by `μ`-samples importance-weighted by `L`.
pub fn pushforward_ks(
    solution: &TransportSolution,
    l: &DensitySpec,
    coordinate: usize,
    samples: usize,
    seed: u64,
    alpha: f64,
) -> Result<KsReport> {
    let dim = solution.dim();
    if l.dim() != dim || coordinate >= dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: l.dim(),
        });
    }
    let xs = standard_normal_samples(seed, samples, dim);
    let pushed: Vec<f64> = xs.chunks(dim).map(|x| solution.forward(x)[coordinate]).collect();
    let zs = standard_normal_samples(seed ^ 0x5eed_0f_7a26e7, 4 * samples, dim);
    let reference: Vec<f64> = zs.chunks(dim).map(|z| z[coordinate]).collect();
    let weights: Vec<f64> = zs.chunks(dim).map(|z| l.density(z)).collect();
    let (statistic, effective_size) = weighted_ks_two_sample(&pushed, &reference, &weights);
    Ok(KsReport {
        statistic,
        effective_size,
        critical: ks_critical(effective_size, alpha),
    })
}
