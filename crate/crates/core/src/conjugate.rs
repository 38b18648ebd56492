//! Conjugate Normal–inverse-gamma regression.
//!
//! Two routes lead to the same closed-form posterior: the marginalized model
//! `y ~ N(Xβ, σ²V_y)` and the augmented latent-effects system
//! `y* = X*γ + η`, `η ~ N(0, σ²V_{y*})`, which stacks the data, the prior rows
//! and the latent-process rows into one generalized least-squares problem.
//! Either way the posterior is `σ² ~ IG(a*, b*)` and `γ | σ² ~ N(Mm, σ²M)`, so
//! draws are exact and independent.

use std::fmt::Debug;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DMatrixView, DVector, Dyn};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::spd_cholesky;
use crate::summary::{summarize, Summary};

/// Prior covariance of β (scaled by σ²).
#[derive(Debug, Clone, PartialEq)]
pub enum PriorCovariance {
    /// Improper uniform prior: `V_β⁻¹ = 0`.
    Flat,
    Proper(DMatrix<f64>),
}

/// `β | σ² ~ N(μ_β, σ²V_β)`, `σ² ~ IG(a_σ, b_σ)` with `E[σ²] = b/(a−1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConjugatePrior {
    pub mu_beta: DVector<f64>,
    pub v_beta: PriorCovariance,
    pub a_sigma: f64,
    pub b_sigma: f64,
}

impl ConjugatePrior {
    pub fn flat(p: usize, a_sigma: f64, b_sigma: f64) -> Self {
        Self::new(DVector::zeros(p), PriorCovariance::Flat, a_sigma, b_sigma)
            .expect("flat prior with invalid inverse-gamma parameters")
    }

    pub fn new(mu_beta: DVector<f64>, v_beta: PriorCovariance, a_sigma: f64, b_sigma: f64) -> Result<Self> {
        if !(a_sigma > 0.0 && a_sigma.is_finite() && b_sigma > 0.0 && b_sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "inverse-gamma prior needs a > 0 and b > 0, got ({a_sigma}, {b_sigma})"
            )));
        }
        if let PriorCovariance::Proper(v) = &v_beta {
            if v.shape() != (mu_beta.len(), mu_beta.len()) {
                return Err(Error::DimensionMismatch("V_beta does not match mu_beta".into()));
            }
            spd_cholesky(v.clone(), "V_beta")?;
        }
        Ok(Self { mu_beta, v_beta, a_sigma, b_sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu_beta.len()
    }

    pub fn is_flat(&self) -> bool {
        matches!(self.v_beta, PriorCovariance::Flat)
    }

    /// `V_β⁻¹`, or `None` for the flat prior.
    pub fn precision(&self) -> Option<DMatrix<f64>> {
        match &self.v_beta {
            PriorCovariance::Flat => None,
            PriorCovariance::Proper(v) => {
                Some(spd_cholesky(v.clone(), "V_beta").expect("validated at construction").inverse())
            }
        }
    }

    /// `(V_β⁻¹, V_β⁻¹μ_β, μ_βᵀV_β⁻¹μ_β)` with zeros for the flat prior.
    pub(crate) fn information_terms(&self) -> (DMatrix<f64>, DVector<f64>, f64) {
        let p = self.dim();
        match self.precision() {
            Some(prec) => {
                let info = &prec * &self.mu_beta;
                let quad = self.mu_beta.dot(&info);
                (prec, info, quad)
            }
            None => (DMatrix::zeros(p, p), DVector::zeros(p), 0.0),
        }
    }
}

/// Solves `V x = b` for a fixed symmetric positive definite `V`.
pub trait CovarianceSolve: Send + Sync {
    fn dim(&self) -> usize;
    fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64>;

    fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let m = self.solve(&DMatrix::from_column_slice(b.len(), 1, b.as_slice()));
        DVector::from_column_slice(m.as_slice())
    }
}

/// Dense Cholesky-backed solver.
#[derive(Debug, Clone)]
pub struct DenseSpdSolver {
    chol: Cholesky<f64, Dyn>,
}

impl DenseSpdSolver {
    pub fn new(v: DMatrix<f64>) -> Result<Self> {
        Ok(Self { chol: spd_cholesky(v, "V_y")? })
    }
}

impl CovarianceSolve for DenseSpdSolver {
    fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }
}

/// `V = s·I`.
#[derive(Debug, Clone, Copy)]
pub struct ScaledIdentity {
    pub n: usize,
    pub scale: f64,
}

impl CovarianceSolve for ScaledIdentity {
    fn dim(&self) -> usize {
        self.n
    }

    fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        b / self.scale
    }
}

/// Block-diagonal `V` whose blocks act on arbitrary (disjoint) index sets.
pub struct BlockDiagonalSolver {
    n: usize,
    blocks: Vec<(Vec<usize>, Box<dyn CovarianceSolve>)>,
}

impl BlockDiagonalSolver {
    pub fn new(n: usize, blocks: Vec<(Vec<usize>, Box<dyn CovarianceSolve>)>) -> Result<Self> {
        let mut seen = vec![false; n];
        for (idx, solver) in &blocks {
            if idx.len() != solver.dim() {
                return Err(Error::DimensionMismatch("block solver size differs from its index set".into()));
            }
            for &i in idx {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidInput(format!("block index {i} out of range or repeated")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidInput("blocks do not cover every index".into()));
        }
        Ok(Self { n, blocks })
    }
}

impl CovarianceSolve for BlockDiagonalSolver {
    fn dim(&self) -> usize {
        self.n
    }

    fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for (idx, solver) in &self.blocks {
            let sol = solver.solve(&b.select_rows(idx));
            for (r, &i) in idx.iter().enumerate() {
                out.row_mut(i).copy_from(&sol.row(r));
            }
        }
        out
    }
}

/// Named coefficient blocks of γ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    Beta,
    /// Latent process at the observed locations.
    W,
    /// Low-rank basis coefficients.
    Z,
    /// Latent process at prediction locations.
    WTilde,
    /// Outcomes at prediction locations.
    YTilde,
}

/// Partition of the coefficient index range `0..dim` into named blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoefficientLayout {
    blocks: Vec<(Block, Range<usize>)>,
}

impl CoefficientLayout {
    /// Consecutive blocks with the given sizes.
    pub fn new(sizes: &[(Block, usize)]) -> Self {
        let mut start = 0;
        let blocks = sizes
            .iter()
            .map(|&(b, len)| {
                let r = start..start + len;
                start += len;
                (b, r)
            })
            .collect();
        Self { blocks }
    }

    pub fn beta_only(p: usize) -> Self {
        Self::new(&[(Block::Beta, p)])
    }

    pub fn dim(&self) -> usize {
        self.blocks.last().map_or(0, |(_, r)| r.end)
    }

    pub fn range(&self, block: Block) -> Option<Range<usize>> {
        self.blocks.iter().find(|(b, _)| *b == block).map(|(_, r)| r.clone())
    }

    pub fn blocks(&self) -> &[(Block, Range<usize>)] {
        &self.blocks
    }
}

/// Access to the conditional posterior covariance `M` (up to σ²).
pub trait PosteriorCovariance: Send + Sync + Debug {
    fn dim(&self) -> usize;

    /// One draw from `N(0, M)`.
    fn draw(&self, rng: &mut dyn RngCore) -> Result<DVector<f64>>;

    /// `M⁻¹` as a dense matrix, when that is affordable.
    fn precision_dense(&self) -> Option<DMatrix<f64>>;

    /// `M` as a dense matrix, when that is affordable.
    fn covariance_dense(&self) -> Option<DMatrix<f64>>;
}

/// `M` held through the Cholesky factor of `M⁻¹ = LLᵀ`; draws are `L⁻ᵀz`.
#[derive(Debug, Clone)]
pub struct DenseCovariance {
    chol: Cholesky<f64, Dyn>,
}

impl DenseCovariance {
    pub fn from_cholesky(chol: Cholesky<f64, Dyn>) -> Self {
        Self { chol }
    }

    pub fn from_precision(precision: DMatrix<f64>) -> Result<Self> {
        Ok(Self { chol: spd_cholesky(precision, "M^-1")? })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }
}

impl PosteriorCovariance for DenseCovariance {
    fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    fn draw(&self, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        let l = self.chol.l();
        Ok(l.transpose().solve_upper_triangular(&z).expect("Cholesky factor has a positive diagonal"))
    }

    fn precision_dense(&self) -> Option<DMatrix<f64>> {
        let l = self.chol.l();
        Some(&l * l.transpose())
    }

    fn covariance_dense(&self) -> Option<DMatrix<f64>> {
        Some(self.chol.inverse())
    }
}

/// Closed-form Normal–inverse-gamma posterior.
#[derive(Debug, Clone)]
pub struct ConjugatePosterior {
    pub a_star: f64,
    pub b_star: f64,
    /// Information vector `m` (so that the posterior mean is `Mm`).
    pub info: DVector<f64>,
    /// Posterior mean `Mm` of the coefficients.
    pub mean: DVector<f64>,
    pub layout: CoefficientLayout,
    /// Number of observed-data rows contributing to `a*`.
    pub n_obs: usize,
    cov: Arc<dyn PosteriorCovariance>,
}

impl ConjugatePosterior {
    pub fn new(
        a_star: f64,
        b_star: f64,
        info: DVector<f64>,
        mean: DVector<f64>,
        layout: CoefficientLayout,
        n_obs: usize,
        cov: Arc<dyn PosteriorCovariance>,
    ) -> Self {
        assert_eq!(mean.len(), layout.dim(), "layout does not match coefficient count");
        assert_eq!(cov.dim(), layout.dim(), "covariance does not match coefficient count");
        Self { a_star, b_star, info, mean, layout, n_obs, cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> &dyn PosteriorCovariance {
        self.cov.as_ref()
    }

    /// `E[σ² | y] = b*/(a*−1)` (infinite when `a* ≤ 1`).
    pub fn sigma2_mean(&self) -> f64 {
        if self.a_star > 1.0 {
            self.b_star / (self.a_star - 1.0)
        } else {
            f64::INFINITY
        }
    }

    /// Marginal posterior covariance of the coefficients, `E[σ²]·M`.
    pub fn marginal_covariance(&self) -> Option<DMatrix<f64>> {
        self.cov.covariance_dense().map(|m| m * self.sigma2_mean())
    }

    pub fn precision_dense(&self) -> Option<DMatrix<f64>> {
        self.cov.precision_dense()
    }

    pub fn covariance_dense(&self) -> Option<DMatrix<f64>> {
        self.cov.covariance_dense()
    }

    pub fn block_mean(&self, block: Block) -> Option<DVector<f64>> {
        self.layout.range(block).map(|r| self.mean.rows(r.start, r.len()).into_owned())
    }
}

/// Posterior for `y ~ N(Xβ, σ²V_y)` with the conjugate prior.
pub fn posterior_marginalized(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    vy: &dyn CovarianceSolve,
    prior: &ConjugatePrior,
) -> Result<ConjugatePosterior> {
    let (n, p) = x.shape();
    if n == 0 || y.len() != n || vy.dim() != n || prior.dim() != p {
        return Err(Error::DimensionMismatch(format!(
            "y has {}, X is {n}x{p}, V_y is {}, prior has {}",
            y.len(),
            vy.dim(),
            prior.dim()
        )));
    }
    let (vb_inv, vb_info, prior_quad) = prior.information_terms();
    let vinv_x = vy.solve(x);
    let vinv_y = vy.solve_vec(y);
    let mut m_inv = vb_inv + x.transpose() * &vinv_x;
    crate::linalg::symmetrize(&mut m_inv);
    let info = vb_info + x.transpose() * &vinv_y;
    let chol = Cholesky::new(m_inv).ok_or_else(|| Error::RankDeficient("M^-1 is singular".into()))?;
    let mean = chol.solve(&info);
    let b_star = prior.b_sigma + 0.5 * (prior_quad + y.dot(&vinv_y) - info.dot(&mean));
    if !(b_star > 0.0) {
        return Err(Error::NonPositiveScale(b_star));
    }
    Ok(ConjugatePosterior::new(
        prior.a_sigma + n as f64 / 2.0,
        b_star,
        info,
        mean,
        CoefficientLayout::beta_only(p),
        n,
        Arc::new(DenseCovariance::from_cholesky(chol)),
    ))
}

/// Covariance (up to σ²) of one row block of an augmented system.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockCovariance {
    ScaledIdentity(f64),
    Dense(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowBlock {
    pub rows: Range<usize>,
    pub cov: BlockCovariance,
}

/// Stacked linear model `y* = X*γ + η`, `η ~ N(0, σ²·blockdiag(V_b))`.
#[derive(Debug, Clone)]
pub struct AugmentedSystem {
    response: DVector<f64>,
    design: DMatrix<f64>,
    blocks: Vec<RowBlock>,
    layout: CoefficientLayout,
    n_obs: usize,
}

impl AugmentedSystem {
    pub fn new(
        response: DVector<f64>,
        design: DMatrix<f64>,
        blocks: Vec<RowBlock>,
        layout: CoefficientLayout,
        n_obs: usize,
    ) -> Result<Self> {
        if response.len() != design.nrows() {
            return Err(Error::DimensionMismatch("response and design row counts differ".into()));
        }
        if layout.dim() != design.ncols() {
            return Err(Error::DimensionMismatch("layout does not partition the design columns".into()));
        }
        let mut next = 0;
        for b in &blocks {
            if b.rows.start != next {
                return Err(Error::DimensionMismatch("row blocks must tile the rows in order".into()));
            }
            match &b.cov {
                BlockCovariance::ScaledIdentity(s) if !(*s > 0.0) => {
                    return Err(Error::InvalidParameter(format!("block scale {s} is not positive")));
                }
                BlockCovariance::Dense(c) if c.shape() != (b.rows.len(), b.rows.len()) => {
                    return Err(Error::DimensionMismatch("block covariance size differs from its rows".into()));
                }
                _ => {}
            }
            next = b.rows.end;
        }
        if next != design.nrows() {
            return Err(Error::DimensionMismatch("row blocks do not cover the design".into()));
        }
        Ok(Self { response, design, blocks, layout, n_obs })
    }

    pub fn response(&self) -> &DVector<f64> {
        &self.response
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn blocks(&self) -> &[RowBlock] {
        &self.blocks
    }

    pub fn layout(&self) -> &CoefficientLayout {
        &self.layout
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    /// Rows premultiplied by `V_{y*}^{-1/2}` (block Cholesky inverse).
    pub fn whiten(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let mut x = self.design.clone();
        let mut y = self.response.clone();
        for b in &self.blocks {
            let (start, len) = (b.rows.start, b.rows.len());
            match &b.cov {
                BlockCovariance::ScaledIdentity(s) => {
                    let f = 1.0 / s.sqrt();
                    x.rows_mut(start, len).scale_mut(f);
                    y.rows_mut(start, len).scale_mut(f);
                }
                BlockCovariance::Dense(c) => {
                    let l = spd_cholesky(c.clone(), "row-block covariance")?.l();
                    let xs = l.solve_lower_triangular(&x.rows(start, len)).expect("positive diagonal");
                    let ys = l.solve_lower_triangular(&y.rows(start, len)).expect("positive diagonal");
                    x.rows_mut(start, len).copy_from(&xs);
                    y.rows_mut(start, len).copy_from(&ys);
                }
            }
        }
        Ok((x, y))
    }
}

/// Augmented system for the latent-effects model:
/// rows `[y; μ_β; 0]`, design `[[X, I], [I_p, O], [O, I]]`,
/// covariance `blockdiag(δ²I, V_β, R)`. A flat prior drops the `μ_β` rows.
pub fn build_augmented_latent(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    prior: &ConjugatePrior,
    r: &DMatrix<f64>,
    delta2: f64,
) -> Result<AugmentedSystem> {
    let (n, p) = x.shape();
    if !(delta2 > 0.0) {
        return Err(Error::InvalidParameter(format!("delta2 must be positive, got {delta2}")));
    }
    if y.len() != n || r.shape() != (n, n) || prior.dim() != p {
        return Err(Error::DimensionMismatch("latent system blocks are not conformable".into()));
    }
    let prior_rows = if prior.is_flat() { 0 } else { p };
    let rows = n + prior_rows + n;
    let mut design = DMatrix::zeros(rows, p + n);
    let mut response = DVector::zeros(rows);
    design.view_mut((0, 0), (n, p)).copy_from(x);
    design.view_mut((0, p), (n, n)).fill_diagonal(1.0);
    response.rows_mut(0, n).copy_from(y);
    let mut blocks = vec![RowBlock { rows: 0..n, cov: BlockCovariance::ScaledIdentity(delta2) }];
    if let PriorCovariance::Proper(v) = &prior.v_beta {
        design.view_mut((n, 0), (p, p)).fill_diagonal(1.0);
        response.rows_mut(n, p).copy_from(&prior.mu_beta);
        blocks.push(RowBlock { rows: n..n + p, cov: BlockCovariance::Dense(v.clone()) });
    }
    let w0 = n + prior_rows;
    design.view_mut((w0, p), (n, n)).fill_diagonal(1.0);
    blocks.push(RowBlock { rows: w0..rows, cov: BlockCovariance::Dense(r.clone()) });
    AugmentedSystem::new(
        response,
        design,
        blocks,
        CoefficientLayout::new(&[(Block::Beta, p), (Block::W, n)]),
        n,
    )
}

/// Posterior of an augmented system under a flat prior on γ.
///
/// `a* = a_σ + n/2` counts observed-data rows only; `b*` is
/// `b_σ + ½‖V^{-1/2}(y* − X*γ̂)‖²`.
pub fn posterior_latent(sys: &AugmentedSystem, prior: &ConjugatePrior) -> Result<ConjugatePosterior> {
    let (xw, yw) = sys.whiten()?;
    let mut m_inv = xw.tr_mul(&xw);
    crate::linalg::symmetrize(&mut m_inv);
    let info = xw.tr_mul(&yw);
    let chol = Cholesky::new(m_inv)
        .ok_or_else(|| Error::RankDeficient("augmented design X* is not of full column rank".into()))?;
    let mean = chol.solve(&info);
    let resid = &yw - &xw * &mean;
    let b_star = prior.b_sigma + 0.5 * resid.norm_squared();
    if !(b_star > 0.0 && b_star.is_finite()) {
        return Err(Error::NonPositiveScale(b_star));
    }
    Ok(ConjugatePosterior::new(
        prior.a_sigma + sys.n_obs() as f64 / 2.0,
        b_star,
        info,
        mean,
        sys.layout().clone(),
        sys.n_obs(),
        Arc::new(DenseCovariance::from_cholesky(chol)),
    ))
}

/// Independent exact draws from a conjugate posterior.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub sigma2: Vec<f64>,
    pub tau2: Vec<f64>,
    /// S × dim, one draw per row.
    pub gamma: DMatrix<f64>,
    pub layout: CoefficientLayout,
    pub delta2: f64,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.sigma2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma2.is_empty()
    }

    pub fn block(&self, block: Block) -> Option<DMatrixView<'_, f64>> {
        self.layout.range(block).map(|r| self.gamma.columns(r.start, r.len()))
    }

    /// Per-coefficient summaries of one block.
    pub fn block_summaries(&self, block: Block) -> Option<Vec<Summary>> {
        self.block(block).map(|b| {
            b.column_iter().map(|c| summarize(c.as_slice())).collect()
        })
    }

    pub fn sigma2_summary(&self) -> Summary {
        summarize(&self.sigma2)
    }

    pub fn tau2_summary(&self) -> Summary {
        summarize(&self.tau2)
    }
}

/// Draw `σ² ~ IG(a*, b*)` then `γ ~ N(Mm, σ²M)`, `S` times, with `τ² = δ²σ²`.
///
/// Each draw runs on its own ChaCha stream derived from one seed taken from
/// `rng`, so output is identical for any thread count.
pub fn sample_exact<R: Rng + ?Sized>(
    post: &ConjugatePosterior,
    draws: usize,
    delta2: f64,
    rng: &mut R,
) -> Result<PosteriorDraws> {
    if draws == 0 {
        return Err(Error::InvalidParameter("draw count must be at least 1".into()));
    }
    if !(delta2 >= 0.0 && delta2.is_finite()) {
        return Err(Error::InvalidParameter(format!("delta2 must be nonnegative, got {delta2}")));
    }
    let gamma_dist = Gamma::new(post.a_star, 1.0 / post.b_star)
        .map_err(|e| Error::InvalidParameter(format!("inverse-gamma({}, {}): {e}", post.a_star, post.b_star)))?;
    let base: u64 = rng.random();
    let dim = post.dim();
    let results: Vec<Result<(f64, DVector<f64>)>> = (0..draws)
        .into_par_iter()
        .map(|s| {
            let mut stream = ChaCha8Rng::seed_from_u64(base);
            stream.set_stream(s as u64);
            let sigma2 = 1.0 / gamma_dist.sample(&mut stream);
            let z = post.cov.draw(&mut stream)?;
            Ok((sigma2, &post.mean + z * sigma2.sqrt()))
        })
        .collect();
    let mut sigma2 = Vec::with_capacity(draws);
    let mut gamma = DMatrix::zeros(draws, dim);
    for (s, r) in results.into_iter().enumerate() {
        let (s2, g) = r?;
        sigma2.push(s2);
        gamma.row_mut(s).copy_from(&g.transpose());
    }
    let tau2 = sigma2.iter().map(|s| s * delta2).collect();
    Ok(PosteriorDraws { sigma2, tau2, gamma, layout: post.layout.clone(), delta2 })
}
