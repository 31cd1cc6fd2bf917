//! Monge-Kantorovitch transport from the standard Gaussian to `L·μ`.

mod checks;
mod discrete;
mod gaussian;
mod grid;
mod ladder;
mod one_d;
mod polar;
mod solution;

pub use checks::{check_cyclic_monotonicity, duality_gap, pushforward_ks, CyclicReport, DualityReport, KsReport};
pub use discrete::{solve_discrete, DiscreteAssignment, DiscreteCoupling};
pub use gaussian::solve_gaussian;
pub use grid::{solve_grid_entropic, solve_grid_entropic_with_plan, EntropicOptions, GridSpec};
pub use ladder::{approximation_ladder, ladder_density, LadderOptions, LadderReport, LadderRung};
pub use one_d::{solve_1d, Cdf1dOptions};
pub use polar::{
    polar_factorize_discrete, polar_factorize_linear, right_inverse_check, DiscretePolar, LinearPolar,
    RightInverseReport,
};
pub use solution::{MatrixMap, SolverKind, TransportSolution, VectorMap};
