//! Low-rank Gaussian predictive process: knots, basis `B = R(ℓ, ℓ*)R(ℓ*, ℓ*)⁻¹`
//! and the reduced latent system over `γ = (β, z)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conjugate::{
    posterior_latent, sample_exact, AugmentedSystem, Block, BlockCovariance, CoefficientLayout, ConjugatePosterior,
    ConjugatePrior, PosteriorDraws, PriorCovariance, RowBlock,
};
use crate::error::{Error, Result};
use crate::geo::{correlation_matrix, correlation_matrix_self, CorrelationFamily, LocationSet, SpatialData};

/// Knot placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KnotStrategy {
    /// Cell centers of a regular grid over the data bounding box.
    #[default]
    Grid,
    /// Uniform random subsample of the data locations.
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnotSet {
    pub knots: LocationSet,
}

impl KnotSet {
    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }
}

/// Split `r` into per-axis counts whose product is `r`, as even as possible,
/// with larger counts on longer axes. Axes of zero extent get one cell.
pub(crate) fn grid_shape(r: usize, extents: &[f64]) -> Vec<usize> {
    let active: Vec<usize> = (0..extents.len()).filter(|&k| extents[k] > 0.0).collect();
    let mut shape = vec![1; extents.len()];
    if active.is_empty() {
        return shape;
    }
    let divisors: Vec<usize> = (1..=r).filter(|d| r % d == 0).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut consider = |counts: Vec<usize>| {
        let max = *counts.iter().max().unwrap() as f64;
        let min = *counts.iter().min().unwrap() as f64;
        let score = max / min;
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, counts));
        }
    };
    match active.len() {
        1 => consider(vec![r]),
        2 => divisors.iter().for_each(|&a| consider(vec![a, r / a])),
        _ => {
            for &a in &divisors {
                for &b in divisors.iter().filter(|&&b| (r / a) % b == 0) {
                    consider(vec![a, b, r / a / b]);
                }
            }
        }
    }
    let mut counts = best.expect("r has at least one factorization").1;
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let mut axes = active;
    axes.sort_by(|&a, &b| extents[b].total_cmp(&extents[a]).then(a.cmp(&b)));
    for (axis, c) in axes.into_iter().zip(counts) {
        shape[axis] = c;
    }
    shape
}

/// Choose `r` knots (`1 ≤ r < n`).
pub fn select_knots(locs: &LocationSet, r: usize, strategy: KnotStrategy) -> Result<KnotSet> {
    let n = locs.len();
    if r == 0 || r >= n {
        return Err(Error::InvalidParameter(format!("knot count r = {r} must satisfy 1 <= r < n = {n}")));
    }
    let knots = match strategy {
        KnotStrategy::Random { seed } => {
            let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), n, r).into_vec();
            idx.sort_unstable();
            locs.select(&idx)
        }
        KnotStrategy::Grid => {
            let bbox = locs.bounding_box();
            let extents: Vec<f64> = bbox.iter().map(|(lo, hi)| hi - lo).collect();
            let shape = grid_shape(r, &extents);
            let dim = locs.dim();
            let mut coords = Vec::with_capacity(r * dim);
            let mut idx = vec![0usize; dim];
            for _ in 0..r {
                for k in 0..dim {
                    let (lo, hi) = bbox[k];
                    coords.push(lo + (idx[k] as f64 + 0.5) * (hi - lo) / shape[k] as f64);
                }
                // last axis varies fastest
                for k in (0..dim).rev() {
                    idx[k] += 1;
                    if idx[k] < shape[k] {
                        break;
                    }
                    idx[k] = 0;
                }
            }
            LocationSet::new(coords, dim)?
        }
    };
    Ok(KnotSet { knots })
}

/// `B` (n × r) and `V_z = R(ℓ*, ℓ*)` on the correlation scale.
#[derive(Debug, Clone)]
pub struct LowRankBasis {
    pub b: DMatrix<f64>,
    pub vz: DMatrix<f64>,
    family: Option<CorrelationFamily>,
    knots: Option<LocationSet>,
    vz_chol: Cholesky<f64, Dyn>,
}

impl LowRankBasis {
    /// A basis from explicit matrices (no predictive-process structure).
    pub fn new(b: DMatrix<f64>, vz: DMatrix<f64>) -> Result<Self> {
        if vz.shape() != (b.ncols(), b.ncols()) {
            return Err(Error::DimensionMismatch("V_z must be r x r for an n x r basis".into()));
        }
        let vz_chol = Cholesky::new(vz.clone()).ok_or_else(|| Error::NotPositiveDefinite("V_z".into()))?;
        Ok(Self { b, vz, family: None, knots: None, vz_chol })
    }

    pub fn rank(&self) -> usize {
        self.b.ncols()
    }

    pub fn knots(&self) -> Option<&LocationSet> {
        self.knots.as_ref()
    }

    /// `B V_z Bᵀ`.
    pub fn induced_covariance(&self) -> DMatrix<f64> {
        &self.b * &self.vz * self.b.transpose()
    }

    /// Diagonal of the induced covariance.
    pub fn induced_variance(&self) -> DVector<f64> {
        let bv = &self.b * &self.vz;
        DVector::from_fn(self.b.nrows(), |i, _| bv.row(i).dot(&self.b.row(i)))
    }

    /// Basis rows `R(ℓ̃, ℓ*)R(ℓ*, ℓ*)⁻¹` at new locations.
    pub fn rows_at(&self, new_locs: &LocationSet) -> Result<DMatrix<f64>> {
        let (family, knots) = match (&self.family, &self.knots) {
            (Some(f), Some(k)) => (f, k),
            _ => return Err(Error::InvalidInput("basis was not built from knots".into())),
        };
        let cross = correlation_matrix(family, new_locs, knots)?;
        Ok(self.vz_chol.solve(&cross.transpose()).transpose())
    }
}

pub fn build_predictive_process_basis(
    family: &CorrelationFamily,
    locs: &LocationSet,
    knots: &KnotSet,
) -> Result<LowRankBasis> {
    let vz = correlation_matrix_self(family, &knots.knots);
    let vz_chol = Cholesky::new(vz.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("knot correlation matrix".into()))?;
    let cross = correlation_matrix(family, locs, &knots.knots)?;
    let b = vz_chol.solve(&cross.transpose()).transpose();
    Ok(LowRankBasis { b, vz, family: Some(*family), knots: Some(knots.knots.clone()), vz_chol })
}

/// Stacked system `[[X, B], [I_p, O], [O, I_r]]`, `blockdiag(δ²I, V_β, V_z)`.
pub fn build_lowrank_system(
    data: &SpatialData,
    basis: &LowRankBasis,
    prior: &ConjugatePrior,
    delta2: f64,
) -> Result<AugmentedSystem> {
    let (n, p) = data.x.shape();
    let r = basis.rank();
    if !(delta2 > 0.0) {
        return Err(Error::InvalidParameter(format!("delta2 must be positive, got {delta2}")));
    }
    if basis.b.nrows() != n || prior.dim() != p {
        return Err(Error::DimensionMismatch("basis rows or prior size do not match the data".into()));
    }
    let prior_rows = if prior.is_flat() { 0 } else { p };
    let rows = n + prior_rows + r;
    let mut design = DMatrix::zeros(rows, p + r);
    let mut response = DVector::zeros(rows);
    design.view_mut((0, 0), (n, p)).copy_from(&data.x);
    design.view_mut((0, p), (n, r)).copy_from(&basis.b);
    response.rows_mut(0, n).copy_from(&data.y);
    let mut blocks = vec![RowBlock { rows: 0..n, cov: BlockCovariance::ScaledIdentity(delta2) }];
    if let PriorCovariance::Proper(v) = &prior.v_beta {
        design.view_mut((n, 0), (p, p)).fill_diagonal(1.0);
        response.rows_mut(n, p).copy_from(&prior.mu_beta);
        blocks.push(RowBlock { rows: n..n + p, cov: BlockCovariance::Dense(v.clone()) });
    }
    let z0 = n + prior_rows;
    design.view_mut((z0, p), (r, r)).fill_diagonal(1.0);
    blocks.push(RowBlock { rows: z0..rows, cov: BlockCovariance::Dense(basis.vz.clone()) });
    AugmentedSystem::new(response, design, blocks, CoefficientLayout::new(&[(Block::Beta, p), (Block::Z, r)]), n)
}

#[derive(Debug, Clone)]
pub struct LowRankFit {
    /// Posterior over `(β, z)`.
    pub posterior: ConjugatePosterior,
    pub draws: Option<PosteriorDraws>,
    /// Latent surface draws `B z`, S × n.
    pub w_draws: Option<DMatrix<f64>>,
    pub delta2: f64,
}

impl LowRankFit {
    pub fn beta_mean(&self) -> DVector<f64> {
        self.posterior.block_mean(Block::Beta).expect("layout has beta")
    }

    pub fn z_mean(&self) -> DVector<f64> {
        self.posterior.block_mean(Block::Z).expect("layout has z")
    }
}

pub fn fit_conjugate_lowrank<R: Rng + ?Sized>(
    data: &SpatialData,
    basis: &LowRankBasis,
    prior: &ConjugatePrior,
    delta2: f64,
    draws: usize,
    rng: &mut R,
) -> Result<LowRankFit> {
    let sys = build_lowrank_system(data, basis, prior, delta2)?;
    let posterior = posterior_latent(&sys, prior)?;
    let (draws, w_draws) = if draws == 0 {
        (None, None)
    } else {
        let d = sample_exact(&posterior, draws, delta2, rng)?;
        let w = d.block(Block::Z).expect("layout has z") * basis.b.transpose();
        (Some(d), Some(w))
    };
    Ok(LowRankFit { posterior, draws, w_draws, delta2 })
}
