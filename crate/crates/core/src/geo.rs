//! Locations, distances, correlation kernels and the dense Gaussian-process oracle.
//!
//! Everything here works on the correlation scale: the spatial variance σ² is
//! carried separately by the conjugate machinery, so `R(φ)` always has a unit
//! diagonal.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::conjugate::{ConjugatePosterior, ConjugatePrior, CoefficientLayout, DenseCovariance};
use crate::error::{Error, Result};
use crate::linalg::{faer_cholesky_in_place, spd_cholesky};

/// Largest `n` accepted by [`simulate_gp`].
pub const SIMULATION_LIMIT: usize = 20_000;
/// Largest `n` accepted by [`dense_posterior_oracle`] and other dense posterior paths.
pub const DENSE_POSTERIOR_LIMIT: usize = 5_000;

/// An ordered set of distinct, finite points in 1, 2 or 3 dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationSet {
    coords: Vec<f64>,
    dim: usize,
}

impl LocationSet {
    /// Build from row-major coordinates. Rejects non-finite values and duplicates.
    pub fn new(coords: Vec<f64>, dim: usize) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidInput(format!("dimension {dim} not in 1..=3")));
        }
        if coords.len() % dim != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} coordinates is not a multiple of dimension {dim}",
                coords.len()
            )));
        }
        if let Some(pos) = coords.iter().position(|c| !c.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite coordinate at point {}",
                pos / dim
            )));
        }
        let set = LocationSet { coords, dim };
        if let Some((first, second)) = set.find_duplicate() {
            return Err(Error::DuplicateLocation { first, second });
        }
        Ok(set)
    }

    pub fn from_points<const D: usize>(points: &[[f64; D]]) -> Result<Self> {
        Self::new(points.iter().flatten().copied().collect(), D)
    }

    /// Locations uniformly distributed on the unit square.
    pub fn uniform_unit_square(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<f64> = (0..2 * n).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        // Continuous draws collide with probability zero; validate anyway.
        Self::new(coords, 2).expect("uniform draws produced a duplicate location")
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    /// Points selected (and reordered) by `indices`. Indices must be distinct.
    pub fn select(&self, indices: &[usize]) -> LocationSet {
        let mut coords = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            coords.extend_from_slice(self.point(i));
        }
        LocationSet { coords, dim: self.dim }
    }

    /// Per-axis (min, max).
    pub fn bounding_box(&self) -> Vec<(f64, f64)> {
        (0..self.dim)
            .map(|k| {
                self.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    (lo.min(p[k]), hi.max(p[k]))
                })
            })
            .collect()
    }

    /// Maximum inter-site distance (the set's diameter).
    pub fn max_distance(&self) -> f64 {
        match self.dim {
            1 => {
                let bb = self.bounding_box();
                bb[0].1 - bb[0].0
            }
            2 => {
                let hull = convex_hull(self);
                let mut best = 0.0f64;
                for (a, pa) in hull.iter().enumerate() {
                    for pb in &hull[a + 1..] {
                        best = best.max(((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt());
                    }
                }
                best
            }
            _ => (0..self.len())
                .into_par_iter()
                .map(|i| {
                    let pi = self.point(i);
                    (i + 1..self.len()).map(|j| euclidean(pi, self.point(j))).fold(0.0, f64::max)
                })
                .reduce(|| 0.0, f64::max),
        }
    }

    fn find_duplicate(&self) -> Option<(usize, usize)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            self.point(a)
                .partial_cmp(self.point(b))
                .expect("finite coordinates")
                .then(a.cmp(&b))
        });
        idx.windows(2)
            .find(|w| self.point(w[0]) == self.point(w[1]))
            .map(|w| (w[0].min(w[1]), w[0].max(w[1])))
    }
}

fn convex_hull(locs: &LocationSet) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = locs.iter().map(|p| [p[0], p[1]]).collect();
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    // upper chain; never pops into the lower one
    let floor = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= floor && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

#[inline]
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Matrix of Euclidean distances between the points of `u` (rows) and `v` (columns).
pub fn pairwise_distances(u: &LocationSet, v: &LocationSet) -> Result<DMatrix<f64>> {
    check_same_dim(u, v)?;
    if u.is_empty() || v.is_empty() {
        return Err(Error::InvalidInput("empty location set".into()));
    }
    Ok(DMatrix::from_fn(u.len(), v.len(), |i, j| euclidean(u.point(i), v.point(j))))
}

fn check_same_dim(u: &LocationSet, v: &LocationSet) -> Result<()> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch(format!(
            "location sets have dimensions {} and {}",
            u.dim(),
            v.dim()
        )));
    }
    Ok(())
}

/// Isotropic correlation families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CorrelationKind {
    Exponential,
    Matern32,
    Matern52,
}

impl std::str::FromStr for CorrelationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exponential" | "exp" => Ok(Self::Exponential),
            "matern32" | "matern3/2" => Ok(Self::Matern32),
            "matern52" | "matern5/2" => Ok(Self::Matern52),
            other => Err(Error::InvalidParameter(format!("unknown correlation family '{other}'"))),
        }
    }
}

impl std::fmt::Display for CorrelationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Exponential => "exponential",
            Self::Matern32 => "matern32",
            Self::Matern52 => "matern52",
        })
    }
}

/// A correlation family with its decay parameter φ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationFamily {
    kind: CorrelationKind,
    phi: f64,
}

impl CorrelationFamily {
    pub fn new(kind: CorrelationKind, phi: f64) -> Result<Self> {
        if !(phi.is_finite() && phi > 0.0) {
            return Err(Error::InvalidParameter(format!("decay phi must be positive, got {phi}")));
        }
        Ok(Self { kind, phi })
    }

    pub fn exponential(phi: f64) -> Result<Self> {
        Self::new(CorrelationKind::Exponential, phi)
    }

    pub fn kind(&self) -> CorrelationKind {
        self.kind
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn with_phi(&self, phi: f64) -> Result<Self> {
        Self::new(self.kind, phi)
    }

    /// ρ(h) for a separation distance `h ≥ 0`.
    #[inline]
    pub fn correlation(&self, h: f64) -> f64 {
        let t = self.phi * h;
        match self.kind {
            CorrelationKind::Exponential => (-t).exp(),
            CorrelationKind::Matern32 => {
                let s = 3f64.sqrt() * t;
                (1.0 + s) * (-s).exp()
            }
            CorrelationKind::Matern52 => {
                let s = 5f64.sqrt() * t;
                (1.0 + s + s * s / 3.0) * (-s).exp()
            }
        }
    }

    #[inline]
    pub fn between(&self, a: &[f64], b: &[f64]) -> f64 {
        self.correlation(euclidean(a, b))
    }
}

/// Cross-correlation matrix `R(U, V)`.
pub fn correlation_matrix(
    family: &CorrelationFamily,
    u: &LocationSet,
    v: &LocationSet,
) -> Result<DMatrix<f64>> {
    check_same_dim(u, v)?;
    Ok(DMatrix::from_fn(u.len(), v.len(), |i, j| family.between(u.point(i), v.point(j))))
}

/// Symmetric correlation matrix `R(U, U)` with an exact unit diagonal.
pub fn correlation_matrix_self(family: &CorrelationFamily, u: &LocationSet) -> DMatrix<f64> {
    let n = u.len();
    let mut r = DMatrix::identity(n, n);
    for j in 0..n {
        for i in (j + 1)..n {
            let v = family.between(u.point(i), u.point(j));
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    r
}

/// Parameters of the full Gaussian-process regression model used to generate data.
#[derive(Debug, Clone, PartialEq)]
pub struct GpOracleModel {
    pub family: CorrelationFamily,
    pub sigma2: f64,
    pub tau2: f64,
    pub beta: DVector<f64>,
}

impl GpOracleModel {
    pub fn new(family: CorrelationFamily, sigma2: f64, tau2: f64, beta: DVector<f64>) -> Result<Self> {
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma2 must be positive, got {sigma2}")));
        }
        if !(tau2.is_finite() && tau2 >= 0.0) {
            return Err(Error::InvalidParameter(format!("tau2 must be nonnegative, got {tau2}")));
        }
        Ok(Self { family, sigma2, tau2, beta })
    }

    /// Noise-to-spatial variance ratio τ²/σ².
    pub fn delta2(&self) -> f64 {
        self.tau2 / self.sigma2
    }
}

/// Simulated outcomes and the latent surface that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub y: DVector<f64>,
    pub w_true: DVector<f64>,
}

/// Draw `y = Xβ + w + ε` with `w ~ N(0, σ²R(φ))` and `ε ~ N(0, τ²I)`.
///
/// The latent draws consume the first `n` normals of the seeded stream and the
/// noise the next `n`, so results do not depend on thread count.
pub fn simulate_gp(
    model: &GpOracleModel,
    locs: &LocationSet,
    x: &DMatrix<f64>,
    seed: u64,
) -> Result<SyntheticDataset> {
    let n = locs.len();
    if n > SIMULATION_LIMIT {
        return Err(Error::TooLarge { n, limit: SIMULATION_LIMIT });
    }
    if x.nrows() != n || x.ncols() != model.beta.len() {
        return Err(Error::DimensionMismatch(format!(
            "design is {}x{}, expected {n}x{}",
            x.nrows(),
            x.ncols(),
            model.beta.len()
        )));
    }
    let family = model.family;
    let mut k = faer::Mat::<f64>::zeros(n, n);
    for j in 0..n {
        let pj = locs.point(j);
        let col = k.col_as_slice_mut(j);
        col[j] = model.sigma2;
        for (i, v) in col.iter_mut().enumerate().skip(j + 1) {
            *v = model.sigma2 * family.between(locs.point(i), pj);
        }
    }
    faer_cholesky_in_place(&mut k, "spatial covariance (duplicate locations?)")?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();

    let mut w = vec![0.0; n];
    for (j, &zj) in z.iter().enumerate() {
        let col = k.col_as_slice(j);
        for i in j..n {
            w[i] += col[i] * zj;
        }
    }
    drop(k);
    let w_true = DVector::from_vec(w);
    let tau = model.tau2.sqrt();
    let y = x * &model.beta + &w_true + DVector::from_iterator(n, eps.iter().map(|e| tau * e));
    Ok(SyntheticDataset { y, w_true })
}

/// Point-referenced regression data: locations, response and design.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialData {
    pub locs: LocationSet,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
}

impl SpatialData {
    pub fn new(locs: LocationSet, y: DVector<f64>, x: DMatrix<f64>) -> Result<Self> {
        if y.len() != locs.len() || x.nrows() != locs.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} locations, {} responses, {} design rows",
                locs.len(),
                y.len(),
                x.nrows()
            )));
        }
        Ok(Self { locs, y, x })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> SpatialData {
        SpatialData {
            locs: self.locs.select(idx),
            y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i])),
            x: self.x.select_rows(idx),
        }
    }
}

/// The benchmark generator: uniform locations on the unit square, an intercept
/// plus one standard-normal predictor, and a GP outcome.
pub fn simulate_unit_square(
    n: usize,
    model: &GpOracleModel,
    seed: u64,
) -> Result<(SpatialData, DVector<f64>)> {
    let locs = LocationSet::uniform_unit_square(n, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_de51_97);
    let p = model.beta.len();
    let x = DMatrix::from_fn(n, p, |_, j| {
        if j == 0 {
            1.0
        } else {
            StandardNormal.sample(&mut rng)
        }
    });
    let sim = simulate_gp(model, &locs, &x, seed.wrapping_add(1))?;
    Ok((SpatialData::new(locs, sim.y, x)?, sim.w_true))
}

/// Exact conjugate posterior by direct dense algebra on `V_y = R(φ) + δ²I`.
///
/// Ground truth for the sparse and low-rank paths; restricted to `n ≤ 5000`.
pub fn dense_posterior_oracle(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    locs: &LocationSet,
    family: &CorrelationFamily,
    delta2: f64,
    prior: &ConjugatePrior,
) -> Result<ConjugatePosterior> {
    let n = y.len();
    if n > DENSE_POSTERIOR_LIMIT {
        return Err(Error::TooLarge { n, limit: DENSE_POSTERIOR_LIMIT });
    }
    if x.nrows() != n || locs.len() != n || prior.dim() != x.ncols() {
        return Err(Error::DimensionMismatch("oracle inputs are not conformable".into()));
    }
    let vy = correlation_matrix_self(family, locs) + DMatrix::identity(n, n) * delta2;
    let vy_inv = spd_cholesky(vy, "V_y")?.inverse();
    let p = x.ncols();
    let (vb_inv, vb_inv_mu) = match prior.precision() {
        Some(prec) => {
            let info = &prec * &prior.mu_beta;
            (prec, info)
        }
        None => (DMatrix::zeros(p, p), DVector::zeros(p)),
    };
    let xt_vinv = x.transpose() * &vy_inv;
    let m_inv = &vb_inv + &xt_vinv * x;
    let info = &vb_inv_mu + &xt_vinv * y;
    let chol = spd_cholesky(m_inv.clone(), "M^-1 (rank-deficient design with flat prior?)")?;
    let mean = chol.solve(&info);
    let quad = prior.mu_beta.dot(&vb_inv_mu) + y.dot(&(&vy_inv * y)) - info.dot(&mean);
    let b_star = prior.b_sigma + 0.5 * quad;
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
        std::sync::Arc::new(DenseCovariance::from_cholesky(chol)),
    ))
}

/// Kullback–Leibler divergence `KL(N(μ1, Σ1) ‖ N(μ2, Σ2))`.
pub fn kl_gaussian(
    mu1: &DVector<f64>,
    sigma1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    sigma2: &DMatrix<f64>,
) -> Result<f64> {
    let k = mu1.len();
    if mu2.len() != k || sigma1.shape() != (k, k) || sigma2.shape() != (k, k) {
        return Err(Error::DimensionMismatch("KL arguments are not conformable".into()));
    }
    let c1 = spd_cholesky(sigma1.clone(), "Sigma1")?;
    let c2 = spd_cholesky(sigma2.clone(), "Sigma2")?;
    let trace = c2.solve(sigma1).trace();
    let diff = mu2 - mu1;
    let maha = diff.dot(&c2.solve(&diff));
    let kl = 0.5 * (trace + maha - k as f64 + crate::linalg::log_det(&c2) - crate::linalg::log_det(&c1));
    Ok(kl.max(0.0))
}
