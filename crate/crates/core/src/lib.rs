//! Optimal transport and Monge-Ampère equations on finite-dimensional
//! Wiener space.

pub mod error;
pub mod gaussian;
pub mod ito;
pub mod linear;
pub mod monge_ampere;
pub mod transport;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use gaussian::{DensitySpec, GaussianSpace, Method, ScalarField};
pub use linear::PerturbationOperator;
pub use transport::{SolverKind, TransportSolution};
