//! K-fold cross-validated grid search over `(φ, δ²)` by holdout RMSPE of
//! conditional-mean predictions.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::conjugate::{posterior_marginalized, ConjugatePrior, DenseSpdSolver};
use crate::error::{Error, Result};
use crate::geo::{correlation_matrix, correlation_matrix_self, CorrelationFamily, CorrelationKind, LocationSet, SpatialData};
use crate::lowrank::{build_predictive_process_basis, fit_conjugate_lowrank, select_knots, KnotStrategy};
use crate::nngp::{NngpModel, PcgConfig};
use crate::predict::{format_float, predictive_mean, predictive_weights_nngp, PredictiveWeights};

/// Which latent model the cross-validation fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Dense,
    Nngp { m: usize },
    LowRank { r: usize, strategy: KnotStrategy },
}

pub fn rmspe(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() != actual.len() || predicted.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "rmspe of {} predictions against {} observations",
            predicted.len(),
            actual.len()
        )));
    }
    let ss: f64 = predicted.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok((ss / predicted.len() as f64).sqrt())
}

/// Seeded balanced partition of `0..n` into `k` sorted folds.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::InvalidParameter(format!("fold count K = {k} must satisfy 2 <= K <= n = {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (pos, i) in idx.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// Candidate values and fold layout for the search.
#[derive(Debug, Clone, PartialEq)]
pub struct CvGrid {
    pub kind: CorrelationKind,
    /// Ascending.
    pub phi_values: Vec<f64>,
    /// Ascending.
    pub delta2_values: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
}

fn log_space(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![(lo * hi).sqrt()];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count).map(|k| (a + (b - a) * k as f64 / (count - 1) as f64).exp()).collect()
}

impl CvGrid {
    /// 8 log-spaced `φ` in `[3/d_max, 300/d_max]` and 5 log-spaced `δ²` in
    /// `[0.001, 1000]`, 5 folds.
    pub fn default_for(locs: &LocationSet, kind: CorrelationKind, seed: u64) -> Result<Self> {
        let d_max = locs.max_distance();
        if !(d_max > 0.0) {
            return Err(Error::InvalidInput("locations have zero spread".into()));
        }
        Ok(Self {
            kind,
            phi_values: log_space(3.0 / d_max, 300.0 / d_max, 8),
            delta2_values: log_space(1e-3, 1e3, 5),
            folds: 5,
            seed,
        })
    }

    /// `count × count` log-spaced grid over `[φ/phi_factor, φ·phi_factor]` and
    /// `[δ²/delta2_factor, δ²·delta2_factor]`, typically centered on variogram
    /// estimates. `δ²` is clamped to `[0.001, 1000]`.
    pub fn around(
        kind: CorrelationKind,
        phi: f64,
        delta2: f64,
        (phi_factor, delta2_factor): (f64, f64),
        count: usize,
        folds: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(phi > 0.0 && phi_factor >= 1.0 && delta2_factor >= 1.0) || count == 0 {
            return Err(Error::InvalidParameter("grid center and factors must be positive (factors >= 1)".into()));
        }
        let d = delta2.clamp(1e-3, 1e3);
        Ok(Self {
            kind,
            phi_values: log_space(phi / phi_factor, phi * phi_factor, count),
            delta2_values: log_space((d / delta2_factor).max(1e-3), (d * delta2_factor).min(1e3), count),
            folds,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.phi_values.len() * self.delta2_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A finer grid of `count × count` points (odd `count`) centered exactly on
    /// `(phi, delta2)` and spanning one coarse step either side in log scale.
    pub fn refined_around(&self, phi: f64, delta2: f64, count: usize) -> Result<Self> {
        if count % 2 == 0 {
            return Err(Error::InvalidParameter("refinement count must be odd so the center is kept".into()));
        }
        let span = |values: &[f64], center: f64| -> (f64, f64) {
            let step = if values.len() > 1 {
                (values[values.len() - 1] / values[0]).ln() / (values.len() - 1) as f64
            } else {
                std::f64::consts::LN_2
            };
            (center * (-step).exp(), center * step.exp())
        };
        let refine = |values: &[f64], center: f64| -> Vec<f64> {
            let (lo, hi) = span(values, center);
            let mut v = log_space(lo, hi, count);
            v[count / 2] = center;
            v
        };
        Ok(Self {
            kind: self.kind,
            phi_values: refine(&self.phi_values, phi),
            delta2_values: refine(&self.delta2_values, delta2),
            folds: self.folds,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvEntry {
    pub phi: f64,
    pub delta2: f64,
    /// Infinite when a fold's solver failed at this grid point.
    pub rmspe: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub best: CvEntry,
    /// Row-major over (φ ascending, δ² ascending).
    pub table: Vec<CvEntry>,
}

impl CvResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = csv::Writer::from_path(path)?;
        out.write_record(["phi", "delta2", "rmspe"])?;
        for e in &self.table {
            out.write_record([format_float(e.phi), format_float(e.delta2), format_float(e.rmspe)])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-fold state reused across grid points.
struct Fold {
    train: SpatialData,
    test: SpatialData,
    nngp: Option<NngpModel>,
    knots: Option<crate::lowrank::KnotSet>,
}

fn fold_predict(fold: &Fold, model: ModelKind, family: &CorrelationFamily, delta2: f64, prior: &ConjugatePrior) -> Result<Vec<f64>> {
    let (train, test) = (&fold.train, &fold.test);
    let pred = match model {
        ModelKind::Dense => {
            let n = train.len();
            let v = correlation_matrix_self(family, &train.locs) + DMatrix::identity(n, n) * delta2;
            let solver = DenseSpdSolver::new(v)?;
            let post = posterior_marginalized(&train.y, &train.x, &solver, prior)?;
            let resid = &train.y - &train.x * &post.mean;
            let alpha = crate::conjugate::CovarianceSolve::solve_vec(&solver, &resid);
            let cross = correlation_matrix(family, &test.locs, &train.locs)?;
            &test.x * &post.mean + cross * alpha
        }
        ModelKind::Nngp { m } => {
            let model = fold.nngp.as_ref().expect("neighbor graph prepared");
            let (post, _) = model.posterior(family, &train.y, &train.x, prior, delta2)?;
            let beta = post.block_mean(crate::conjugate::Block::Beta).expect("beta block");
            let w = post.block_mean(crate::conjugate::Block::W).expect("w block");
            let weights = predictive_weights_nngp(family, &train.locs, &test.locs, m.min(train.len()))?;
            predictive_mean(&weights, &test.x, &beta, &w)?
        }
        ModelKind::LowRank { .. } => {
            let knots = fold.knots.as_ref().expect("knots prepared");
            let basis = build_predictive_process_basis(family, &train.locs, knots)?;
            let fit = fit_conjugate_lowrank(train, &basis, prior, delta2, 0, &mut ChaCha8Rng::seed_from_u64(0))?;
            let weights = PredictiveWeights::from_basis_rows(&basis.rows_at(&test.locs)?);
            predictive_mean(&weights, &test.x, &fit.beta_mean(), &fit.z_mean())?
        }
    };
    Ok(pred.as_slice().to_vec())
}

/// Evaluate every grid point by K-fold RMSPE (squared errors pooled over all
/// held-out rows) and return the argmin, ties going to the smaller `φ` and
/// then the smaller `δ²`. A grid point whose solver fails to converge in some
/// fold scores `+∞`.
pub fn cv_select(data: &SpatialData, model: ModelKind, grid: &CvGrid, prior: &ConjugatePrior) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("cross-validation grid is empty".into()));
    }
    let p = data.x.ncols();
    let folds = fold_assignment(data.len(), grid.folds, grid.seed)?;
    let prepared: Vec<Fold> = folds
        .iter()
        .enumerate()
        .map(|(k, test_idx)| {
            let mut in_test = vec![false; data.len()];
            test_idx.iter().for_each(|&i| in_test[i] = true);
            let train_idx: Vec<usize> = (0..data.len()).filter(|&i| !in_test[i]).collect();
            if train_idx.len() <= p {
                return Err(Error::FoldTooSmall { fold: k, rows: train_idx.len(), p });
            }
            let train = data.select(&train_idx);
            let nngp = match model {
                ModelKind::Nngp { m } => Some(
                    NngpModel::new(&train.locs, m.min(train.len() - 1))?.with_pcg(PcgConfig::default()),
                ),
                _ => None,
            };
            let knots = match model {
                ModelKind::LowRank { r, strategy } => Some(select_knots(&train.locs, r, strategy)?),
                _ => None,
            };
            Ok(Fold { test: data.select(test_idx), train, nngp, knots })
        })
        .collect::<Result<_>>()?;

    let points: Vec<(f64, f64)> =
        grid.phi_values.iter().flat_map(|&phi| grid.delta2_values.iter().map(move |&d| (phi, d))).collect();
    let work: Vec<(usize, usize)> = (0..points.len()).flat_map(|g| (0..prepared.len()).map(move |k| (g, k))).collect();
    let sq_errors: Vec<Result<Option<f64>>> = work
        .par_iter()
        .map(|&(g, k)| {
            let (phi, delta2) = points[g];
            let family = CorrelationFamily::new(grid.kind, phi)?;
            match fold_predict(&prepared[k], model, &family, delta2, prior) {
                Ok(pred) => {
                    let y = &prepared[k].test.y;
                    Ok(Some(pred.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum()))
                }
                Err(Error::NotConverged { .. } | Error::Indefinite(_) | Error::NotPositiveDefinite(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut totals = vec![Some(0.0); points.len()];
    for (&(g, _), r) in work.iter().zip(sq_errors) {
        totals[g] = match (totals[g], r?) {
            (Some(a), Some(b)) => Some(a + b),
            _ => None,
        };
    }
    let n = data.len() as f64;
    let table: Vec<CvEntry> = points
        .iter()
        .zip(&totals)
        .map(|(&(phi, delta2), t)| CvEntry { phi, delta2, rmspe: t.map_or(f64::INFINITY, |s| (s / n).sqrt()) })
        .collect();
    Ok(CvResult { best: select_best(&table), table })
}

/// First strict minimum in (φ, δ²)-ascending order.
fn select_best(table: &[CvEntry]) -> CvEntry {
    let mut best = table[0];
    for e in &table[1..] {
        if e.rmspe < best.rmspe {
            best = *e;
        }
    }
    best
}

/// Coarse search followed by one refinement pass (`count × count` points
/// around the coarse argmin, same folds). Returns both passes.
pub fn cv_two_pass(
    data: &SpatialData,
    model: ModelKind,
    grid: &CvGrid,
    prior: &ConjugatePrior,
    count: usize,
) -> Result<(CvResult, CvResult)> {
    let first = cv_select(data, model, grid, prior)?;
    let fine = grid.refined_around(first.best.phi, first.best.delta2, count)?;
    let second = cv_select(data, model, &fine, prior)?;
    Ok((first, second))
}

/// Ordinary least squares residuals `y − Xβ̂`, the input to the variogram.
pub fn ols_residuals(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x.nrows() != y.len() || x.nrows() < x.ncols() {
        return Err(Error::DimensionMismatch("design must have one row per response and n >= p".into()));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().amax();
    if r.diagonal().iter().any(|d| d.abs() <= 1e-12 * scale) {
        return Err(Error::RankDeficient("design matrix for the non-spatial regression".into()));
    }
    let beta = r.solve_upper_triangular(&(qr.q().transpose() * y)).expect("nonzero diagonal");
    Ok(y - x * beta)
}
