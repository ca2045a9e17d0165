//! Numerical primitives: seeded RNG streams, symmetric eigendecomposition,
//! Gaussian conditioning and log-densities, and 1-d adaptive quadrature.

pub mod eig;
pub mod gaussian;
pub mod quadrature;
pub mod rng;

pub use eig::{sym_eig, SymEig};
pub use gaussian::{gauss_logpdf, gaussian_condition, GaussianSpec};
pub use quadrature::quadrature_1d;
pub use rng::RngStream;

/// ln(2π), used throughout the Gaussian densities.
pub const LN_2PI: f64 = 1.8378770664093453;
