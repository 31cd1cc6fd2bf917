//! Small statistical helpers shared by the Monte Carlo checks.

use libm::erfc;
use statrs::function::erf::erfc_inv;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn std_normal_log_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

pub fn std_normal_pdf(x: f64) -> f64 {
    std_normal_log_pdf(x).exp()
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Upper tail `1 - Φ(x)`, accurate for large positive `x`.
pub fn std_normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

pub fn std_normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// Quantile from an upper-tail probability, accurate for tiny `q`.
pub fn std_normal_quantile_upper(q: f64) -> f64 {
    std::f64::consts::SQRT_2 * erfc_inv(2.0 * q)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_error: f64,
}

impl MeanEstimate {
    /// Sample mean with the standard error of the mean; fixed summation order.
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        assert!(n > 0, "empty sample");
        let mean = xs.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Self { mean, std_error: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Self {
            mean,
            std_error: (var / n as f64).sqrt(),
        }
    }

    pub fn exact(mean: f64) -> Self {
        Self { mean, std_error: 0.0 }
    }

    pub fn within(&self, target: f64, sigmas: f64, extra: f64) -> bool {
        (self.mean - target).abs() <= sigmas * self.std_error + extra
    }
}

/// Kolmogorov-Smirnov statistic of a sample against a continuous CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Weighted KS statistic; returns the statistic and the effective sample size.
pub fn weighted_ks_statistic(samples: &[f64], weights: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.sort_by(|&a, &b| samples[a].total_cmp(&samples[b]));
    let total: f64 = weights.iter().sum();
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    let mut acc = 0.0;
    let mut stat: f64 = 0.0;
    for i in idx {
        let f = cdf(samples[i]);
        let before = acc / total;
        acc += weights[i];
        let after = acc / total;
        stat = stat.max((f - before).abs()).max((after - f).abs());
    }
    (stat, total * total / sum_sq)
}

/// Two-sample KS statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Two-sample KS statistic between an unweighted sample `a` and a weighted
/// sample `b`; returns the statistic and the effective combined size
/// `n_a n_b / (n_a + n_b)` with `n_b = (Σw)² / Σw²`.
pub fn weighted_ks_two_sample(a: &[f64], b: &[f64], wb: &[f64]) -> (f64, f64) {
    assert_eq!(b.len(), wb.len(), "one weight per sample");
    let mut a = a.to_vec();
    a.sort_by(f64::total_cmp);
    let mut idx: Vec<usize> = (0..b.len()).collect();
    idx.sort_by(|&i, &j| b[i].total_cmp(&b[j]));
    let total: f64 = wb.iter().sum();
    let nb = total * total / wb.iter().map(|w| w * w).sum::<f64>();
    let na = a.len() as f64;
    let (mut i, mut j, mut acc, mut d) = (0usize, 0usize, 0.0f64, 0.0f64);
    while i < a.len() && j < idx.len() {
        let x = a[i].min(b[idx[j]]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < idx.len() && b[idx[j]] <= x {
            acc += wb[idx[j]];
            j += 1;
        }
        d = d.max((i as f64 / na - acc / total).abs());
    }
    (d, na * nb / (na + nb))
}

/// Asymptotic KS critical value at level `alpha` for effective size `n`.
pub fn ks_critical(n: f64, alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() / n.sqrt()
}

pub fn ks_critical_two_sample(na: f64, nb: f64, alpha: f64) -> f64 {
    ks_critical(na * nb / (na + nb), alpha)
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    assert!(n > 0, "median of empty slice");
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
