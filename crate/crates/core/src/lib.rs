//! Unbiased estimation of the score and Hessian of the log-likelihood of
//! partially observed diffusions.
//!
//! The latent process `dX = a_θ(X) dt + σ(X) dW` is discretized with Euler
//! steps of size `2^{-l}`. Coupled conditional particle filters produce
//! unbiased estimates of smoothing expectations at each level, and a random
//! level draw with survival-probability weights removes the discretization
//! bias. The [`oracle`] module gives exact references for linear-Gaussian
//! models, and [`optimize`] runs SGD and Newton fits on top of the estimators.

pub mod coupling;
pub mod cpf;
pub mod discretization;
pub mod error;
pub mod estimator;
pub mod functionals;
pub mod model;
pub mod optimize;
pub mod oracle;
pub mod rng;
pub mod stats;

#[cfg(test)]
mod testutil;

pub use coupling::{CheckMeasure, PairCoupling, Pmf};
pub use discretization::{BrownianBlock, GridPath};
pub use error::{Error, Result};
pub use estimator::{EstimatorConfig, HessianEstimate, LevelDistribution, LevelSpec, ScoreEstimate};
pub use functionals::FunctionalBundle;
pub use model::{BuiltinModel, Fhn, Model, Mou2d, Observations, Ou1d, Params};
pub use optimize::{FitConfig, FitTrace};
pub use oracle::{LinearGaussianSpec, Transition};
