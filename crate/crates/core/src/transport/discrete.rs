use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A coupling between two weighted atom clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteCoupling {
    pub source_atoms: Vec<Vec<f64>>,
    pub source_weights: Vec<f64>,
    pub target_atoms: Vec<Vec<f64>>,
    pub target_weights: Vec<f64>,
    /// `plan[(i, j)]` is the mass sent from source atom `i` to target atom `j`.
    pub plan: DMatrix<f64>,
}

impl DiscreteCoupling {
    /// Largest absolute deviation of the row sums and of the column sums
    /// from the prescribed weights.
    pub fn marginal_errors(&self) -> (f64, f64) {
        let rows = (0..self.plan.nrows())
            .map(|i| (self.plan.row(i).sum() - self.source_weights[i]).abs())
            .fold(0.0, f64::max);
        let cols = (0..self.plan.ncols())
            .map(|j| (self.plan.column(j).sum() - self.target_weights[j]).abs())
            .fold(0.0, f64::max);
        (rows, cols)
    }

    /// `Σ plan_ij |x_i - y_j|²`.
    pub fn cost(&self) -> f64 {
        let mut total = 0.0;
        for i in 0..self.plan.nrows() {
            for j in 0..self.plan.ncols() {
                let p = self.plan[(i, j)];
                if p != 0.0 {
                    total += p * squared_distance(&self.source_atoms[i], &self.target_atoms[j]);
                }
            }
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteAssignment {
    /// Source atom `i` is sent to target atom `assignment[i]`.
    pub assignment: Vec<usize>,
    /// `(1/m) Σ |x_i - y_{σ(i)}|²`.
    pub cost: f64,
    pub coupling: DiscreteCoupling,
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum()
}

/// Optimal assignment between equal-weight atom clouds of the same size for
/// the cost `|x - y|²`, by shortest augmenting paths in `O(m³)`.
pub fn solve_discrete(source: &[Vec<f64>], target: &[Vec<f64>]) -> Result<DiscreteAssignment> {
    let m = source.len();
    if m == 0 {
        return Err(Error::InvalidArgument("no atoms".into()));
    }
    if target.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: target.len(),
        });
    }
    let dim = source[0].len();
    if let Some(bad) = source.iter().chain(target).find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    let cost = DMatrix::from_fn(m, m, |i, j| squared_distance(&source[i], &target[j]));
    let assignment = assign(&cost);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    let w = 1.0 / m as f64;
    let mut plan = DMatrix::zeros(m, m);
    for (i, &j) in assignment.iter().enumerate() {
        plan[(i, j)] = w;
    }
    Ok(DiscreteAssignment {
        assignment,
        cost: total * w,
        coupling: DiscreteCoupling {
            source_atoms: source.to_vec(),
            source_weights: vec![w; m],
            target_atoms: target.to_vec(),
            target_weights: vec![w; m],
            plan,
        },
    })
}

/// Minimum-cost perfect matching of a square cost matrix; returns the
/// column assigned to each row.
pub(crate) fn assign(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    // 1-based arrays with a virtual column 0, following the classic
    // potential-based formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let i0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = col0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    col1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=n {
        out[owner[j] - 1] = j - 1;
    }
    out
}
