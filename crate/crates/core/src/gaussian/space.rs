use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::quadrature::{gauss_hermite, integrate};
use crate::error::{check_dim, Error, Result};
use crate::rng::stream_rng;
use crate::stats::MeanEstimate;

const MC_BLOCK: usize = 4096;

/// The standard Gaussian measure on `R^n`, together with the numerical
/// settings used to integrate against it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GaussianSpace {
    pub dim: usize,
    /// Gauss-Hermite nodes per axis.
    pub quadrature_order: usize,
    pub mc_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Tensor Gauss-Hermite quadrature.
    Quadrature,
    MonteCarlo,
    /// Adaptive Gauss-Legendre on `[-LINE_RADIUS, LINE_RADIUS]`; one
    /// dimension only. Suited to integrands with jumps or kinks.
    AdaptiveLine,
}

pub const LINE_RADIUS: f64 = 12.0;

impl GaussianSpace {
    pub fn new(dim: usize, quadrature_order: usize, mc_samples: usize, seed: u64) -> Result<Self> {
        if dim < 1 {
            return Err(Error::InvalidArgument("dimension must be at least 1".into()));
        }
        if quadrature_order < 2 {
            return Err(Error::InvalidArgument("quadrature order must be at least 2".into()));
        }
        if mc_samples < 1 {
            return Err(Error::InvalidArgument("at least one Monte Carlo sample is required".into()));
        }
        Ok(Self {
            dim,
            quadrature_order,
            mc_samples,
            seed,
        })
    }

    /// Order-24 quadrature, 10^5 Monte Carlo samples, seed 0.
    pub fn standard(dim: usize) -> Self {
        Self::new(dim, 24, 100_000, 0).expect("valid defaults")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_quadrature_order(mut self, order: usize) -> Self {
        assert!(order >= 2);
        self.quadrature_order = order;
        self
    }

    pub fn with_mc_samples(mut self, n: usize) -> Self {
        assert!(n >= 1);
        self.mc_samples = n;
        self
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        assert!(dim >= 1);
        self.dim = dim;
        self
    }

    /// Tensor quadrature up to three dimensions, Monte Carlo beyond.
    pub fn default_method(&self) -> Method {
        if self.dim <= 3 {
            Method::Quadrature
        } else {
            Method::MonteCarlo
        }
    }

    /// Visits every node of the tensor Gauss-Hermite grid with its weight.
    pub fn for_each_node(&self, mut visit: impl FnMut(&[f64], f64)) {
        tensor_hermite(self.dim, self.quadrature_order, |x, w| visit(x, w));
    }

    /// Draws the Monte Carlo sample as a flat row-major `mc_samples × dim` array.
    pub fn samples(&self) -> Vec<f64> {
        standard_normal_samples(self.seed, self.mc_samples, self.dim)
    }
}

pub(crate) fn tensor_hermite(dim: usize, order: usize, mut visit: impl FnMut(&[f64], f64)) {
    let rule = gauss_hermite(order);
    let mut idx = vec![0usize; dim];
    let mut x = vec![rule.nodes[0]; dim];
    loop {
        let w: f64 = idx.iter().map(|&i| rule.weights[i]).product();
        visit(&x, w);
        let mut axis = 0;
        loop {
            if axis == dim {
                return;
            }
            idx[axis] += 1;
            if idx[axis] < order {
                x[axis] = rule.nodes[idx[axis]];
                break;
            }
            idx[axis] = 0;
            x[axis] = rule.nodes[0];
            axis += 1;
        }
    }
}

/// `n × dim` standard normal draws; block `b` of the output depends only on
/// `(seed, b)`.
pub fn standard_normal_samples(seed: u64, n: usize, dim: usize) -> Vec<f64> {
    let blocks = n.div_ceil(MC_BLOCK);
    let chunks: Vec<Vec<f64>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, b as u64);
            let rows = MC_BLOCK.min(n - b * MC_BLOCK);
            (0..rows * dim).map(|_| StandardNormal.sample(&mut rng)).collect()
        })
        .collect();
    chunks.concat()
}

pub fn gaussian_log_density(x: &[f64], space: &GaussianSpace) -> Result<f64> {
    check_dim(space.dim, x.len())?;
    Ok(standard_log_density(x))
}

pub(crate) fn standard_log_density(x: &[f64]) -> f64 {
    let sq: f64 = x.iter().map(|v| v * v).sum();
    -0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * sq
}

/// Gaussian expectation of `g`.
///
/// Quadrature estimates carry a zero standard error; Monte Carlo estimates
/// report the sample standard error of the mean.
pub fn expect<G>(g: G, space: &GaussianSpace, method: Method) -> Result<MeanEstimate>
where
    G: Fn(&[f64]) -> f64 + Sync,
{
    match method {
        Method::Quadrature => {
            let mut acc = 0.0;
            let mut bad = None;
            space.for_each_node(|x, w| {
                if bad.is_some() {
                    return;
                }
                let v = g(x);
                if !v.is_finite() {
                    bad = Some(x.to_vec());
                }
                acc += w * v;
            });
            match bad {
                Some(node) => Err(Error::NonFinite { node }),
                None => Ok(MeanEstimate::exact(acc)),
            }
        }
        Method::MonteCarlo => {
            let draws = space.samples();
            let values: Vec<f64> = draws.par_chunks(space.dim).map(&g).collect();
            if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                let node = draws[i * space.dim..(i + 1) * space.dim].to_vec();
                return Err(Error::NonFinite { node });
            }
            Ok(MeanEstimate::from_samples(&values))
        }
        Method::AdaptiveLine => {
            check_dim(1, space.dim)?;
            let mut bad = None;
            let v = integrate(
                |x| {
                    let v = g(&[x]) * (standard_log_density(&[x])).exp();
                    if !v.is_finite() && bad.is_none() {
                        bad = Some(vec![x]);
                    }
                    v
                },
                -LINE_RADIUS,
                LINE_RADIUS,
                1e-13,
            );
            match bad {
                Some(node) => Err(Error::NonFinite { node }),
                None => Ok(MeanEstimate::exact(v)),
            }
        }
    }
}
