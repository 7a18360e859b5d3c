//! Reparametrized variational Bayes for two-level generalized linear mixed
//! models.
//!
//! Subject-level random effects are mapped through affine transforms built
//! from Gaussian approximations of their conditional posteriors, and a
//! block-diagonal Gaussian variational posterior over the transformed
//! parameters is fitted by stochastic gradient ascent.
//!
//! The numerical code is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64`.

pub mod cli;
pub mod error;
pub mod engine;
pub mod family;
pub mod gradients;
pub mod matcalc;
pub mod model;
pub mod posterior;
pub mod recombine;
pub mod reparam;
pub mod scalar;

pub use error::{Result, RvbError};
pub use family::Family;
pub use reparam::TransformMethod;
pub use scalar::Real;

pub type Dataset64 = model::Dataset<f64>;
pub type Subject64 = model::Subject<f64>;
pub type GlobalParams64 = model::GlobalParams<f64>;
pub type Priors64 = model::Priors<f64>;
pub type LocalTransform64 = reparam::LocalTransform<f64>;
pub type SquareMatrix64 = matcalc::SquareMatrix<f64>;
pub type LowerTriangular64 = matcalc::LowerTriangular<f64>;
pub type VariationalState64 = engine::VariationalState<f64>;
pub type FitResult64 = engine::FitResult<f64>;
pub type PosteriorSummary64 = posterior::PosteriorSummary<f64>;
pub type GaussianFactor64 = recombine::GaussianFactor<f64>;
pub type ShardedFit64 = recombine::ShardedFit<f64>;
