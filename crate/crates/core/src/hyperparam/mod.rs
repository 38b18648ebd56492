//! Fixing `(φ, δ²)`: variogram-based starting values and K-fold
//! cross-validated grid search.

pub mod cv;
pub mod variogram;

pub use cv::{cv_select, cv_two_pass, fold_assignment, ols_residuals, rmspe, CvEntry, CvGrid, CvResult, ModelKind};
pub use variogram::{empirical_variogram, fit_variogram, EmpiricalVariogram, VariogramFit};
