//! Gaussian reference-measure calculus on `R^n`.

mod convexity;
mod density;
mod field;
pub mod quadrature;
mod smoothing;
mod space;

pub use convexity::{box_grid, check_h_log_concave, check_one_convex, min_eigenvalue, ConvexityReport, EIGEN_TOL};
pub use density::{box_mass, interval_mass, relative_entropy, DensitySpec};
pub use field::{Differentiation, ScalarField, FD_STEP};
pub use smoothing::{conditional_projection, ou_apply, ou_field};
pub use space::{expect, gaussian_log_density, standard_normal_samples, GaussianSpace, Method, LINE_RADIUS};
pub(crate) use space::standard_log_density;
