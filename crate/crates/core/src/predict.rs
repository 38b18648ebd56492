//! Posterior-predictive kriging at new locations: per-location weights
//! `(cᵢ, fᵢ)`, composition sampling of `(w̃, Ỹ)`, and the joint stacked system
//! that carries the predictions as extra coefficients.

use std::path::Path;

use nalgebra::{DMatrix, DMatrixView, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::conjugate::{
    AugmentedSystem, Block, BlockCovariance, CoefficientLayout, ConjugatePrior, PosteriorDraws, PriorCovariance,
    RowBlock,
};
use crate::error::{Error, Result};
use crate::geo::{correlation_matrix, correlation_matrix_self, CorrelationFamily, LocationSet, SpatialData, DENSE_POSTERIOR_LIMIT};
use crate::knn::GridIndex;
use crate::linalg::{spd_cholesky, symmetrize};
use crate::nngp::factor::kriging_weights;
use crate::summary::{summarize, Summary};

/// Kriging weights `cᵢ` over a conditioning set of latent coordinates and the
/// conditional variance `fᵢ` (correlation scale) for each new location.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveWeights {
    /// Conditioning indices into the latent vector, per new location.
    pub sets: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
    pub f: Vec<f64>,
    latent_dim: usize,
}

impl PredictiveWeights {
    pub fn new(sets: Vec<Vec<usize>>, weights: Vec<Vec<f64>>, f: Vec<f64>, latent_dim: usize) -> Result<Self> {
        if sets.len() != weights.len() || sets.len() != f.len() {
            return Err(Error::DimensionMismatch("weights, sets and variances differ in length".into()));
        }
        for (s, w) in sets.iter().zip(&weights) {
            if s.len() != w.len() || s.iter().any(|&j| j >= latent_dim) {
                return Err(Error::DimensionMismatch("conditioning set does not match its weights".into()));
            }
        }
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParameter("conditional variances must lie in [0, 1]".into()));
        }
        Ok(Self { sets, weights, f, latent_dim })
    }

    /// Deterministic weights from basis rows (low-rank prediction `w̃ = b̃ᵀz`).
    pub fn from_basis_rows(rows: &DMatrix<f64>) -> Self {
        let r = rows.ncols();
        Self {
            sets: vec![(0..r).collect(); rows.nrows()],
            weights: rows.row_iter().map(|row| row.iter().copied().collect()).collect(),
            f: vec![0.0; rows.nrows()],
            latent_dim: r,
        }
    }

    pub fn len(&self) -> usize {
        self.f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f.is_empty()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// `cᵢᵀ latent` for every new location.
    pub fn interpolate(&self, latent: &[f64]) -> Vec<f64> {
        self.sets
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| s.iter().zip(w).map(|(&j, c)| c * latent[j]).sum())
            .collect()
    }

    /// Dense `C` (ñ × latent dimension).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.len(), self.latent_dim);
        for (i, (s, w)) in self.sets.iter().zip(&self.weights).enumerate() {
            for (&j, &v) in s.iter().zip(w) {
                c[(i, j)] += v;
            }
        }
        c
    }
}

/// Weights conditioning on every training location.
pub fn predictive_weights_dense(
    family: &CorrelationFamily,
    train: &LocationSet,
    new_locs: &LocationSet,
) -> Result<PredictiveWeights> {
    let n = train.len();
    if n > DENSE_POSTERIOR_LIMIT {
        return Err(Error::TooLarge { n, limit: DENSE_POSTERIOR_LIMIT });
    }
    let chol = spd_cholesky(correlation_matrix_self(family, train), "training correlation matrix")?;
    let cross = correlation_matrix(family, train, new_locs)?;
    let c = chol.solve(&cross);
    let all: Vec<usize> = (0..n).collect();
    let mut weights = Vec::with_capacity(new_locs.len());
    let mut f = Vec::with_capacity(new_locs.len());
    for i in 0..new_locs.len() {
        let col = c.column(i);
        f.push((1.0 - col.dot(&cross.column(i))).clamp(0.0, 1.0));
        weights.push(col.iter().copied().collect());
    }
    PredictiveWeights::new(vec![all; new_locs.len()], weights, f, n)
}

/// Weights conditioning on the `m` nearest training locations.
pub fn predictive_weights_nngp(
    family: &CorrelationFamily,
    train: &LocationSet,
    new_locs: &LocationSet,
    m: usize,
) -> Result<PredictiveWeights> {
    let n = train.len();
    if m == 0 || m > n {
        return Err(Error::InvalidParameter(format!("neighbor count m = {m} must satisfy 1 <= m <= n = {n}")));
    }
    if train.dim() != new_locs.dim() {
        return Err(Error::DimensionMismatch("training and prediction locations differ in dimension".into()));
    }
    let index = GridIndex::new(train.coords(), train.dim());
    let rows: Vec<Result<(Vec<usize>, Vec<f64>, f64)>> = (0..new_locs.len())
        .into_par_iter()
        .map(|i| {
            let target = new_locs.point(i);
            let mut set = index.nearest(target, m);
            set.sort_unstable();
            let pts: Vec<&[f64]> = set.iter().map(|&j| train.point(j)).collect();
            let (w, f) = kriging_weights(family, &pts, target)?;
            Ok((set, w, f.clamp(0.0, 1.0)))
        })
        .collect();
    let mut sets = Vec::with_capacity(rows.len());
    let mut weights = Vec::with_capacity(rows.len());
    let mut f = Vec::with_capacity(rows.len());
    for row in rows {
        let (s, w, v) = row?;
        sets.push(s);
        weights.push(w);
        f.push(v);
    }
    PredictiveWeights::new(sets, weights, f, n)
}

/// Predictive draws (S × ñ) and their per-location summaries.
#[derive(Debug, Clone)]
pub struct PredictiveDraws {
    pub w_tilde: DMatrix<f64>,
    pub y_tilde: DMatrix<f64>,
    pub w_summary: Vec<Summary>,
    pub y_summary: Vec<Summary>,
}

impl PredictiveDraws {
    pub fn from_draws(w_tilde: DMatrix<f64>, y_tilde: DMatrix<f64>) -> Self {
        let w_summary = w_tilde.column_iter().map(|c| summarize(c.as_slice())).collect();
        let y_summary = y_tilde.column_iter().map(|c| summarize(c.as_slice())).collect();
        Self { w_tilde, y_tilde, w_summary, y_summary }
    }

    pub fn y_mean(&self) -> DVector<f64> {
        DVector::from_iterator(self.y_summary.len(), self.y_summary.iter().map(|s| s.mean))
    }

    /// Prediction table: coordinates then mean, sd and 95% limits of `w̃` and `Ỹ`.
    pub fn write_csv(&self, locs: &LocationSet, path: &Path) -> Result<()> {
        if locs.len() != self.w_summary.len() {
            return Err(Error::DimensionMismatch("locations do not match predictions".into()));
        }
        let mut out = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = ["x", "y", "z"][..locs.dim()].to_vec();
        header.extend(["w_mean", "w_sd", "w_q025", "w_q975", "y_mean", "y_sd", "y_q025", "y_q975"]);
        out.write_record(&header)?;
        for i in 0..locs.len() {
            let (w, y) = (self.w_summary[i], self.y_summary[i]);
            let vals = locs.point(i).iter().copied().chain([w.mean, w.sd, w.q025, w.q975, y.mean, y.sd, y.q025, y.q975]);
            out.write_record(vals.map(format_float))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Fixed 17-significant-digit rendering used in every output table.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Composition sampling from posterior draws holding `Beta` and `W` blocks.
pub fn sample_predictive<R: Rng + ?Sized>(
    draws: &PosteriorDraws,
    weights: &PredictiveWeights,
    x_new: &DMatrix<f64>,
    rng: &mut R,
) -> Result<PredictiveDraws> {
    let beta = draws.block(Block::Beta).ok_or_else(|| Error::InvalidInput("draws carry no beta block".into()))?;
    let latent = draws
        .block(Block::W)
        .or_else(|| draws.block(Block::Z))
        .ok_or_else(|| Error::InvalidInput("draws carry no latent block".into()))?;
    sample_predictive_latent(beta, latent, &draws.sigma2, draws.delta2, weights, x_new, rng)
}

/// For each draw `s` and location `i`:
/// `w̃ᵢ ~ N(cᵢᵀw⁽ˢ⁾, σ²⁽ˢ⁾fᵢ)`, `Ỹᵢ ~ N(x̃ᵢᵀβ⁽ˢ⁾ + w̃ᵢ, δ²σ²⁽ˢ⁾)`.
///
/// Draw `s` uses its own ChaCha stream, so results do not depend on threading.
pub fn sample_predictive_latent<R: Rng + ?Sized>(
    beta: DMatrixView<'_, f64>,
    latent: DMatrixView<'_, f64>,
    sigma2: &[f64],
    delta2: f64,
    weights: &PredictiveWeights,
    x_new: &DMatrix<f64>,
    rng: &mut R,
) -> Result<PredictiveDraws> {
    let s_count = sigma2.len();
    let nt = weights.len();
    if beta.nrows() != s_count || latent.nrows() != s_count {
        return Err(Error::DimensionMismatch("draw counts differ across blocks".into()));
    }
    if latent.ncols() != weights.latent_dim() || x_new.shape() != (nt, beta.ncols()) {
        return Err(Error::DimensionMismatch("prediction design or weights do not match the fit".into()));
    }
    let base: u64 = rng.random();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..s_count)
        .into_par_iter()
        .map(|s| {
            let mut stream = ChaCha8Rng::seed_from_u64(base);
            stream.set_stream(s as u64);
            let w: Vec<f64> = latent.row(s).iter().copied().collect();
            let mean_w = weights.interpolate(&w);
            let sd = sigma2[s].sqrt();
            let noise_sd = (delta2 * sigma2[s]).sqrt();
            let mut wt = Vec::with_capacity(nt);
            let mut yt = Vec::with_capacity(nt);
            for i in 0..nt {
                let z1: f64 = StandardNormal.sample(&mut stream);
                let z2: f64 = StandardNormal.sample(&mut stream);
                let wi = mean_w[i] + sd * weights.f[i].sqrt() * z1;
                let xb = x_new.row(i).dot(&beta.row(s));
                wt.push(wi);
                yt.push(xb + wi + noise_sd * z2);
            }
            (wt, yt)
        })
        .collect();
    let mut w_tilde = DMatrix::zeros(s_count, nt);
    let mut y_tilde = DMatrix::zeros(s_count, nt);
    for (s, (wt, yt)) in rows.into_iter().enumerate() {
        w_tilde.row_mut(s).copy_from_slice(&wt);
        y_tilde.row_mut(s).copy_from_slice(&yt);
    }
    Ok(PredictiveDraws::from_draws(w_tilde, y_tilde))
}

/// Point prediction `x̃ᵢᵀβ + cᵢᵀw` at fixed coefficients.
pub fn predictive_mean(
    weights: &PredictiveWeights,
    x_new: &DMatrix<f64>,
    beta: &DVector<f64>,
    latent: &DVector<f64>,
) -> Result<DVector<f64>> {
    if latent.len() != weights.latent_dim() || x_new.shape() != (weights.len(), beta.len()) {
        return Err(Error::DimensionMismatch("prediction design or weights do not match the fit".into()));
    }
    let w = weights.interpolate(latent.as_slice());
    Ok(x_new * beta + DVector::from_vec(w))
}

/// Stacked system over `γ = (β, w, w̃, Ỹ)`:
///
/// ```text
/// [ y ]   [ X   I   O   O ]       δ²I
/// [ μ_β ] [ I_p O   O   O ]       V_β
/// [ 0 ] = [ O   I   O   O ] γ + η, R
/// [ 0 ]   [ O   C  −I   O ]       F
/// [ 0 ]   [ X̃   O   I  −I ]       δ²I
/// ```
///
/// with `C = R(ℓ̃, ℓ)R⁻¹` and dense `F = R(ℓ̃, ℓ̃) − C R(ℓ, ℓ̃)`, which must be
/// positive definite (prediction points distinct from training points and
/// from each other). A flat prior drops the `μ_β` rows.
pub fn build_joint_predictive_system(
    data: &SpatialData,
    x_new: &DMatrix<f64>,
    new_locs: &LocationSet,
    prior: &ConjugatePrior,
    family: &CorrelationFamily,
    delta2: f64,
) -> Result<AugmentedSystem> {
    let (n, p) = data.x.shape();
    let nt = new_locs.len();
    if n > DENSE_POSTERIOR_LIMIT {
        return Err(Error::TooLarge { n, limit: DENSE_POSTERIOR_LIMIT });
    }
    if !(delta2 > 0.0) {
        return Err(Error::InvalidParameter(format!("delta2 must be positive, got {delta2}")));
    }
    if x_new.shape() != (nt, p) || prior.dim() != p {
        return Err(Error::DimensionMismatch("prediction design or prior does not match the data".into()));
    }
    let r = correlation_matrix_self(family, &data.locs);
    let chol = spd_cholesky(r.clone(), "training correlation matrix")?;
    let cross = correlation_matrix(family, &data.locs, new_locs)?;
    let c = chol.solve(&cross).transpose();
    let mut f = correlation_matrix_self(family, new_locs) - &c * &cross;
    symmetrize(&mut f);

    let prior_rows = if prior.is_flat() { 0 } else { p };
    let rows = n + prior_rows + n + 2 * nt;
    let (cw, cwt, cyt) = (p, p + n, p + n + nt);
    let mut design = DMatrix::zeros(rows, p + n + 2 * nt);
    let mut response = DVector::zeros(rows);
    design.view_mut((0, 0), (n, p)).copy_from(&data.x);
    design.view_mut((0, cw), (n, n)).fill_diagonal(1.0);
    response.rows_mut(0, n).copy_from(&data.y);
    let mut blocks = vec![RowBlock { rows: 0..n, cov: BlockCovariance::ScaledIdentity(delta2) }];
    if let PriorCovariance::Proper(v) = &prior.v_beta {
        design.view_mut((n, 0), (p, p)).fill_diagonal(1.0);
        response.rows_mut(n, p).copy_from(&prior.mu_beta);
        blocks.push(RowBlock { rows: n..n + p, cov: BlockCovariance::Dense(v.clone()) });
    }
    let r0 = n + prior_rows;
    design.view_mut((r0, cw), (n, n)).fill_diagonal(1.0);
    blocks.push(RowBlock { rows: r0..r0 + n, cov: BlockCovariance::Dense(r) });
    let f0 = r0 + n;
    design.view_mut((f0, cw), (nt, n)).copy_from(&c);
    design.view_mut((f0, cwt), (nt, nt)).fill_diagonal(-1.0);
    blocks.push(RowBlock { rows: f0..f0 + nt, cov: BlockCovariance::Dense(f) });
    let y0 = f0 + nt;
    design.view_mut((y0, 0), (nt, p)).copy_from(x_new);
    design.view_mut((y0, cwt), (nt, nt)).fill_diagonal(1.0);
    design.view_mut((y0, cyt), (nt, nt)).fill_diagonal(-1.0);
    blocks.push(RowBlock { rows: y0..rows, cov: BlockCovariance::ScaledIdentity(delta2) });
    let layout = CoefficientLayout::new(&[(Block::Beta, p), (Block::W, n), (Block::WTilde, nt), (Block::YTilde, nt)]);
    AugmentedSystem::new(response, design, blocks, layout, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conjugate::{build_augmented_latent, posterior_latent, sample_exact};
    use crate::geo::{simulate_unit_square, GpOracleModel};
    use crate::linalg::max_abs_diff;

    fn fam() -> CorrelationFamily {
        CorrelationFamily::exponential(6.0).unwrap()
    }

    #[test]
    fn training_point_interpolates() {
        let train = LocationSet::uniform_unit_square(40, 1);
        let new = train.select(&[7]);
        for w in [predictive_weights_dense(&fam(), &train, &new).unwrap(), predictive_weights_nngp(&fam(), &train, &new, 8).unwrap()] {
            let dense = w.to_dense();
            for j in 0..40 {
                assert!((dense[(0, j)] - if j == 7 { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
            assert!(w.f[0] < 1e-10);
        }
    }

    #[test]
    fn far_point_reverts_to_prior() {
        let train = LocationSet::uniform_unit_square(20, 2);
        let new = LocationSet::from_points(&[[1e4, 1e4]]).unwrap();
        let w = predictive_weights_dense(&fam(), &train, &new).unwrap();
        assert!(w.weights[0].iter().all(|c| c.abs() < 1e-300));
        assert_eq!(w.f[0], 1.0);
    }

    #[test]
    fn dense_weights_match_direct_formula() {
        let train = LocationSet::uniform_unit_square(60, 3);
        let new = LocationSet::uniform_unit_square(15, 4);
        let w = predictive_weights_dense(&fam(), &train, &new).unwrap();
        let r_inv = correlation_matrix_self(&fam(), &train).try_inverse().unwrap();
        let k = correlation_matrix(&fam(), &new, &train).unwrap();
        let c = &k * &r_inv;
        assert!(max_abs_diff(&w.to_dense(), &c) < 1e-10);
        for i in 0..15 {
            let f = 1.0 - (c.row(i) * k.row(i).transpose())[0];
            assert!((w.f[i] - f).abs() < 1e-10);
        }
    }

    #[test]
    fn saturated_neighbors_equal_dense() {
        let train = LocationSet::uniform_unit_square(50, 5);
        let new = LocationSet::uniform_unit_square(10, 6);
        let a = predictive_weights_dense(&fam(), &train, &new).unwrap();
        let b = predictive_weights_nngp(&fam(), &train, &new, 50).unwrap();
        assert!(max_abs_diff(&a.to_dense(), &b.to_dense()) < 1e-10);
        for i in 0..10 {
            assert!((a.f[i] - b.f[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn single_neighbor_kriging() {
        let train = LocationSet::uniform_unit_square(50, 7);
        let new = LocationSet::uniform_unit_square(10, 8);
        let w = predictive_weights_nngp(&fam(), &train, &new, 1).unwrap();
        for i in 0..10 {
            let h = (0..50).map(|j| crate::geo::euclidean(new.point(i), train.point(j))).fold(f64::INFINITY, f64::min);
            let rho = (-6.0 * h).exp();
            assert!((w.weights[i][0] - rho).abs() < 1e-12);
            assert!((w.f[i] - (1.0 - rho * rho)).abs() < 1e-12);
        }
    }

    #[test]
    fn neighbor_weights_approach_dense_as_m_grows() {
        let train = LocationSet::uniform_unit_square(500, 9);
        let new = LocationSet::uniform_unit_square(50, 10);
        let dense = predictive_weights_dense(&fam(), &train, &new).unwrap().to_dense();
        let dev: Vec<f64> = [5, 10, 20]
            .iter()
            .map(|&m| (predictive_weights_nngp(&fam(), &train, &new, m).unwrap().to_dense() - &dense).abs().mean())
            .collect();
        assert!(dev[0] > dev[1] && dev[1] > dev[2], "{dev:?}");
    }

    #[test]
    fn conditional_variance_grows_along_a_transect() {
        let train = LocationSet::from_points(&[[0.0, 0.0], [0.1, 0.3], [0.05, 0.6]]).unwrap();
        let new = LocationSet::from_points(&[[0.0, 0.0], [0.1, 0.0], [0.2, 0.0], [0.4, 0.0], [0.8, 0.0]]).unwrap();
        let w = predictive_weights_dense(&fam(), &train, &new).unwrap();
        assert!(w.f.windows(2).all(|p| p[0] < p[1]), "{:?}", w.f);
    }

    fn model() -> GpOracleModel {
        GpOracleModel::new(CorrelationFamily::exponential(16.0).unwrap(), 2.0, 0.2, DVector::from_vec(vec![1.0, -5.0]))
            .unwrap()
    }

    #[test]
    fn degenerate_prediction_reproduces_fitted_values() {
        let (d, _) = simulate_unit_square(40, &model(), 1).unwrap();
        let prior = ConjugatePrior::flat(2, 2.0, 1.0);
        let r = correlation_matrix_self(&model().family, &d.locs);
        let post = posterior_latent(&build_augmented_latent(&d.y, &d.x, &prior, &r, 0.1).unwrap(), &prior).unwrap();
        let mut draws = sample_exact(&post, 50, 0.1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        draws.delta2 = 0.0;
        let idx = [3, 17, 30];
        let weights = predictive_weights_dense(&model().family, &d.locs, &d.locs.select(&idx)).unwrap();
        let x_new = d.x.select_rows(&idx);
        let pred = sample_predictive(&draws, &weights, &x_new, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let beta = draws.block(Block::Beta).unwrap();
        let w = draws.block(Block::W).unwrap();
        for s in 0..50 {
            for (i, &j) in idx.iter().enumerate() {
                let fitted = x_new.row(i).dot(&beta.row(s)) + w[(s, j)];
                assert!((pred.y_tilde[(s, i)] - fitted).abs() < 1e-8);
                assert!((pred.w_tilde[(s, i)] - w[(s, j)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn summaries_are_reproducible_from_draws() {
        let (d, _) = simulate_unit_square(40, &model(), 4).unwrap();
        let prior = ConjugatePrior::flat(2, 2.0, 1.0);
        let r = correlation_matrix_self(&model().family, &d.locs);
        let post = posterior_latent(&build_augmented_latent(&d.y, &d.x, &prior, &r, 0.1).unwrap(), &prior).unwrap();
        let draws = sample_exact(&post, 30, 0.1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let new = LocationSet::uniform_unit_square(6, 99);
        let weights = predictive_weights_nngp(&model().family, &d.locs, &new, 5).unwrap();
        let x_new = DMatrix::from_fn(6, 2, |_, j| if j == 0 { 1.0 } else { 0.5 });
        let a = sample_predictive(&draws, &weights, &x_new, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let b = sample_predictive(&draws, &weights, &x_new, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(a.y_tilde, b.y_tilde);
        let again = PredictiveDraws::from_draws(a.w_tilde.clone(), a.y_tilde.clone());
        assert_eq!(again.w_summary, a.w_summary);
        assert_eq!(again.y_summary, a.y_summary);
        assert!(a.y_summary.iter().all(|s| s.q025 <= s.q975));
    }

    #[test]
    fn joint_system_shape_and_means() {
        let (d, _) = simulate_unit_square(30, &model(), 7).unwrap();
        let prior = ConjugatePrior::new(
            DVector::zeros(2),
            PriorCovariance::Proper(DMatrix::identity(2, 2) * 100.0),
            2.0,
            1.0,
        )
        .unwrap();
        let new = LocationSet::uniform_unit_square(4, 70);
        let x_new = DMatrix::from_fn(4, 2, |i, j| if j == 0 { 1.0 } else { i as f64 * 0.3 });
        let sys = build_joint_predictive_system(&d, &x_new, &new, &prior, &model().family, 0.1).unwrap();
        assert_eq!(sys.design().shape(), (30 + 2 + 30 + 4 + 4, 2 + 30 + 4 + 4));
        let post = posterior_latent(&sys, &prior).unwrap();
        let r = correlation_matrix_self(&model().family, &d.locs);
        let base = posterior_latent(&build_augmented_latent(&d.y, &d.x, &prior, &r, 0.1).unwrap(), &prior).unwrap();
        assert!((post.a_star - base.a_star).abs() < 1e-12);
        assert!((post.b_star - base.b_star).abs() < 1e-9 * base.b_star);
        let weights = predictive_weights_dense(&model().family, &d.locs, &new).unwrap();
        let beta = base.block_mean(Block::Beta).unwrap();
        let w = base.block_mean(Block::W).unwrap();
        let wt = DVector::from_vec(weights.interpolate(w.as_slice()));
        assert!((post.block_mean(Block::WTilde).unwrap() - &wt).amax() < 1e-8);
        assert!((post.block_mean(Block::YTilde).unwrap() - (&x_new * beta + wt)).amax() < 1e-8);
    }

    #[test]
    fn joint_system_rejects_training_points() {
        let (d, _) = simulate_unit_square(20, &model(), 8).unwrap();
        let prior = ConjugatePrior::flat(2, 2.0, 1.0);
        let new = d.locs.select(&[0]);
        let sys = build_joint_predictive_system(&d, &d.x.select_rows(&[0]), &new, &prior, &model().family, 0.1).unwrap();
        assert!(posterior_latent(&sys, &prior).is_err());
    }
}
