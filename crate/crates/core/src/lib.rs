//! Exact Bayesian inference for Gaussian spatial regression through conjugate
//! Normal–inverse-gamma posteriors, with scalable latent-process approximations.

pub mod conjugate;
pub mod error;
pub mod geo;
pub mod hyperparam;
pub mod knn;
pub mod linalg;
pub mod lowrank;
pub mod metakrige;
pub mod nngp;
pub mod predict;
pub mod sparse;
pub mod summary;

pub use conjugate::{
    build_augmented_latent, posterior_latent, posterior_marginalized, sample_exact, AugmentedSystem, Block,
    BlockCovariance, CoefficientLayout, ConjugatePosterior, ConjugatePrior, CovarianceSolve, DenseCovariance,
    DenseSpdSolver, PosteriorCovariance, PosteriorDraws, PriorCovariance, RowBlock, ScaledIdentity,
};
pub use error::{Error, Result};
pub use geo::{CorrelationFamily, CorrelationKind, GpOracleModel, LocationSet, SpatialData};
pub use summary::{summarize, Summary};
