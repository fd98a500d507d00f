//! Numerical laboratory for semilinear backward Kolmogorov equations on
//! Gaussian Galerkin truncations.
//!
//! Two engines solve the same problems: the analytic engine iterates the mild
//! form `u_t = P_{T-t}φ + ∫_t^T P_{s-t} f(s, ·, u_s, A^{1/2}∇u_s) ds` on a
//! tensor Gauss–Hermite grid, and the probabilistic engine solves the
//! associated BSDE by least-squares Monte Carlo on simulated paths.
//!
//! All numerics are generic over [`Real`] (`f32` or `f64`); the aliases below
//! fix the common `f64` instantiation.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod basis;
pub mod bsde;
pub mod driver;
pub mod error;
pub mod linalg;
pub mod mild;
pub mod paths;
pub mod quadrature;
mod rng;
pub mod scalar;
pub mod semigroup;
pub mod space;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Real;
pub use stats::Estimate;

pub type Space = space::TruncatedSpace<f64>;
pub type Field = space::Field<f64>;
pub type SpaceTimeField = space::SpaceTimeField<f64>;
pub type Semigroup = semigroup::SemigroupSpec<f64>;
pub type Problem = mild::SemilinearProblem<f64>;
pub type DriverRef = driver::DriverRef<f64>;
pub type PathEnsemble = paths::PathEnsemble<f64>;
pub type BsdeSolution = bsde::BsdeSolution<f64>;

pub type Space32 = space::TruncatedSpace<f32>;
pub type Problem32 = mild::SemilinearProblem<f32>;
