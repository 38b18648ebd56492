//! Divide-and-conquer inference: exact pooling of conjugate subset summaries
//! and geometric-median pooling of subset posterior samples.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rayon::prelude::*;

use crate::conjugate::{
    sample_exact, CoefficientLayout, ConjugatePosterior, ConjugatePrior, CovarianceSolve, DenseCovariance,
};
use crate::error::{Error, Result};
use crate::geo::LocationSet;
use crate::linalg::symmetrize;
use crate::lowrank::grid_shape;
use crate::predict::format_float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PartitionStrategy {
    /// Shuffle, then deal round-robin: sizes differ by at most one.
    #[default]
    RandomBalanced,
    /// Regular grid of cells over the bounding box, one subset per cell.
    SpatialBlocks,
}

/// Split the points of `locs` into `k` disjoint index sets covering all of them.
pub fn partition_data(locs: &LocationSet, k: usize, strategy: PartitionStrategy, seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = locs.len();
    if k < 2 || n < k {
        return Err(Error::InvalidParameter(format!("subset count K = {k} must satisfy 2 <= K <= n = {n}")));
    }
    let mut sets = vec![Vec::new(); k];
    match strategy {
        PartitionStrategy::RandomBalanced => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            for (pos, i) in idx.into_iter().enumerate() {
                sets[pos % k].push(i);
            }
        }
        PartitionStrategy::SpatialBlocks => {
            let bbox = locs.bounding_box();
            let extents: Vec<f64> = bbox.iter().map(|(lo, hi)| hi - lo).collect();
            let shape = grid_shape(k, &extents);
            for (i, p) in locs.iter().enumerate() {
                let mut cell = 0;
                for d in 0..locs.dim() {
                    let (lo, hi) = bbox[d];
                    let c = if hi > lo { (((p[d] - lo) / (hi - lo)) * shape[d] as f64) as usize } else { 0 };
                    cell = cell * shape[d] + c.min(shape[d] - 1);
                }
                sets[cell].push(i);
            }
            if let Some(empty) = sets.iter().position(|s| s.is_empty()) {
                return Err(Error::InvalidInput(format!("spatial block {empty} contains no points")));
            }
        }
    }
    sets.iter_mut().for_each(|s| s.sort_unstable());
    Ok(sets)
}

/// Sufficient statistics of one subset:
/// `m_k = V_β⁻¹μ_β + X_kᵀV⁻¹y_k`, `M_k⁻¹ = V_β⁻¹ + X_kᵀV⁻¹X_k`, `y_kᵀV⁻¹y_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetSummary {
    pub k: usize,
    pub n_k: usize,
    pub m_k: DVector<f64>,
    pub minv_k: DMatrix<f64>,
    pub quad_k: f64,
}

pub fn subset_summary(
    k: usize,
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    vy: &dyn CovarianceSolve,
    prior: &ConjugatePrior,
) -> Result<SubsetSummary> {
    let (n, p) = x.shape();
    if y.len() != n || vy.dim() != n || prior.dim() != p {
        return Err(Error::DimensionMismatch(format!("subset {k}: blocks are not conformable")));
    }
    let (prec, info, _) = prior.information_terms();
    let vinv_y = vy.solve_vec(y);
    let mut minv_k = prec + x.transpose() * vy.solve(x);
    symmetrize(&mut minv_k);
    Ok(SubsetSummary { k, n_k: n, m_k: info + x.transpose() * &vinv_y, minv_k, quad_k: y.dot(&vinv_y) })
}

impl SubsetSummary {
    /// One line: `k,n_k,q,m_1..m_q,lower triangle of M⁻¹ row by row,quad`.
    pub fn to_record(&self) -> Vec<String> {
        let q = self.m_k.len();
        let mut rec = vec![self.k.to_string(), self.n_k.to_string(), q.to_string()];
        rec.extend(self.m_k.iter().map(|&v| format_float(v)));
        for i in 0..q {
            for j in 0..=i {
                rec.push(format_float(self.minv_k[(i, j)]));
            }
        }
        rec.push(format_float(self.quad_k));
        rec
    }

    pub fn from_record(fields: &[&str]) -> Result<Self> {
        let bad = |what: &str| Error::InvalidInput(format!("subset summary record: {what}"));
        let int = |s: &str| s.trim().parse::<usize>().map_err(|_| bad("integer field"));
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("numeric field"));
        if fields.len() < 3 {
            return Err(bad("too few fields"));
        }
        let (k, n_k, q) = (int(fields[0])?, int(fields[1])?, int(fields[2])?);
        if fields.len() != 3 + q + q * (q + 1) / 2 + 1 {
            return Err(bad("field count does not match q"));
        }
        let m_k = DVector::from_iterator(q, fields[3..3 + q].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?);
        let mut minv_k = DMatrix::zeros(q, q);
        let mut pos = 3 + q;
        for i in 0..q {
            for j in 0..=i {
                let v = num(fields[pos])?;
                minv_k[(i, j)] = v;
                minv_k[(j, i)] = v;
                pos += 1;
            }
        }
        Ok(Self { k, n_k, m_k, minv_k, quad_k: num(fields[pos])? })
    }
}

pub fn write_summaries(path: &Path, summaries: &[SubsetSummary]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in summaries {
        writeln!(out, "{}", s.to_record().join(","))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_summaries(path: &Path) -> Result<Vec<SubsetSummary>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(SubsetSummary::from_record(&line.split(',').collect::<Vec<_>>())?);
        }
    }
    Ok(out)
}

fn check_common_dim(summaries: &[SubsetSummary], prior: &ConjugatePrior) -> Result<usize> {
    let q = prior.dim();
    if summaries.is_empty() {
        return Err(Error::InvalidInput("no subset summaries to pool".into()));
    }
    if summaries.iter().any(|s| s.m_k.len() != q || s.minv_k.shape() != (q, q)) {
        return Err(Error::DimensionMismatch("subset summaries differ from the prior dimension".into()));
    }
    Ok(q)
}

fn posterior_from(
    prior: &ConjugatePrior,
    n: usize,
    info: DVector<f64>,
    mut minv: DMatrix<f64>,
    b_star: impl FnOnce(&DVector<f64>, &DVector<f64>) -> f64,
) -> Result<ConjugatePosterior> {
    symmetrize(&mut minv);
    let q = info.len();
    let chol = Cholesky::new(minv).ok_or_else(|| Error::NotPositiveDefinite("pooled M^-1".into()))?;
    let mean = chol.solve(&info);
    let b = b_star(&info, &mean);
    if !(b > 0.0) {
        return Err(Error::NonPositiveScale(b));
    }
    Ok(ConjugatePosterior::new(
        prior.a_sigma + n as f64 / 2.0,
        b,
        info,
        mean,
        CoefficientLayout::beta_only(q),
        n,
        Arc::new(DenseCovariance::from_cholesky(chol)),
    ))
}

/// Batch pooling: subtract the `K − 1` surplus copies of the prior from the
/// summed summaries.
pub fn pool_exact(summaries: &[SubsetSummary], prior: &ConjugatePrior) -> Result<ConjugatePosterior> {
    let q = check_common_dim(summaries, prior)?;
    let (prec, prior_info, prior_quad) = prior.information_terms();
    let surplus = (summaries.len() - 1) as f64;
    let mut info = -&prior_info * surplus;
    let mut minv = -&prec * surplus;
    let mut quad = prior_quad;
    let mut n = 0;
    for s in summaries {
        info += &s.m_k;
        minv += &s.minv_k;
        quad += s.quad_k;
        n += s.n_k;
    }
    debug_assert_eq!(info.len(), q);
    posterior_from(prior, n, info, minv, |info, mean| prior.b_sigma + 0.5 * (quad - info.dot(mean)))
}

/// Sequential pooling: the posterior after each subset is the prior for the
/// next. Produces the same posterior as [`pool_exact`].
pub fn pool_sequential(summaries: &[SubsetSummary], prior: &ConjugatePrior) -> Result<ConjugatePosterior> {
    check_common_dim(summaries, prior)?;
    let (prec0, info0, quad0) = prior.information_terms();
    let (mut prec, mut info) = (prec0.clone(), info0.clone());
    // running μᵀPμ of the current "prior"
    let mut quad = quad0;
    let mut b = prior.b_sigma;
    let mut n = 0;
    for s in summaries {
        let next_prec = &prec + (&s.minv_k - &prec0);
        let next_info = &info + (&s.m_k - &info0);
        let mut sym = next_prec.clone();
        symmetrize(&mut sym);
        let next_quad = match Cholesky::new(sym) {
            Some(c) => next_info.dot(&c.solve(&next_info)),
            None => return Err(Error::NotPositiveDefinite(format!("posterior precision after subset {}", s.k))),
        };
        b += 0.5 * (quad + s.quad_k - next_quad);
        prec = next_prec;
        info = next_info;
        quad = next_quad;
        n += s.n_k;
    }
    posterior_from(prior, n, info, prec, |_, _| b)
}

/// Kernel `ρ(z₁, z₂) = exp(−‖z₁ − z₂‖²/h²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// `h` = median pairwise distance of the pooled samples.
    MedianHeuristic,
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::Fixed(1.0)
    }
}

/// Mean kernel value over all pairs of rows of `a` and `b`.
fn mean_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, h: f64) -> f64 {
    let inv = 1.0 / (h * h);
    let total: f64 = (0..a.nrows())
        .into_par_iter()
        .map(|i| {
            let ai = a.row(i);
            (0..b.nrows()).map(|j| (-(ai - b.row(j)).norm_squared() * inv).exp()).sum::<f64>()
        })
        .sum();
    total / (a.nrows() * b.nrows()) as f64
}

fn median_pairwise_distance(sets: &[&DMatrix<f64>]) -> f64 {
    let rows: Vec<DVector<f64>> =
        sets.iter().flat_map(|m| m.row_iter().map(|r| r.transpose()).collect::<Vec<_>>()).collect();
    // subsample for large pools; the heuristic only needs a scale
    let stride = (rows.len() / 1000).max(1);
    let pick: Vec<&DVector<f64>> = rows.iter().step_by(stride).collect();
    let mut d = Vec::with_capacity(pick.len() * pick.len() / 2);
    for i in 0..pick.len() {
        for j in i + 1..pick.len() {
            d.push((pick[i] - pick[j]).norm());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let med = d[d.len() / 2];
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

fn resolve_bandwidth(bw: Bandwidth, sets: &[&DMatrix<f64>]) -> Result<f64> {
    match bw {
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => Ok(h),
        Bandwidth::Fixed(h) => Err(Error::InvalidParameter(format!("kernel bandwidth must be positive, got {h}"))),
        Bandwidth::MedianHeuristic => Ok(median_pairwise_distance(sets)),
    }
}

/// Empirical kernel-embedding distance between two sample sets (rows are draws).
pub fn rkhs_distance(a: &DMatrix<f64>, b: &DMatrix<f64>, bandwidth: Bandwidth) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 || a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch("sample sets must be nonempty with equal widths".into()));
    }
    let h = resolve_bandwidth(bandwidth, &[a, b])?;
    let d2 = mean_kernel(a, a, h) + mean_kernel(b, b, h) - 2.0 * mean_kernel(a, b, h);
    Ok(d2.max(0.0).sqrt())
}

/// Subset posterior samples, one row per draw.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetPosteriorSamples {
    pub k: usize,
    pub draws: DMatrix<f64>,
}

/// Geometric median of the subset posteriors as the mixture `Σ αₖ pₖ`.
#[derive(Debug, Clone)]
pub struct GeometricMedianPosterior {
    pub weights: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `Σₖ ‖pₖ − π‖` at the start and after every iteration.
    pub objective_trace: Vec<f64>,
    pub bandwidth: f64,
    pub components: Vec<Arc<SubsetPosteriorSamples>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeiszfeldConfig {
    pub tol: f64,
    pub max_iters: usize,
    pub bandwidth: Bandwidth,
}

impl Default for WeiszfeldConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_iters: 1000, bandwidth: Bandwidth::default() }
    }
}

/// Gram matrix of the empirical kernel embeddings, `G_ij = mean ρ(pᵢ, pⱼ)`.
pub fn embedding_gram(sets: &[&DMatrix<f64>], h: f64) -> DMatrix<f64> {
    let k = sets.len();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i..k).map(move |j| (i, j))).collect();
    let vals: Vec<f64> = pairs.par_iter().map(|&(i, j)| mean_kernel(sets[i], sets[j], h)).collect();
    let mut g = DMatrix::zeros(k, k);
    for (&(i, j), v) in pairs.iter().zip(vals) {
        g[(i, j)] = v;
        g[(j, i)] = v;
    }
    g
}

/// `‖pₖ − Σⱼ αⱼpⱼ‖` for every `k`, from the embedding Gram matrix.
pub fn mixture_distances(gram: &DMatrix<f64>, alpha: &[f64]) -> Vec<f64> {
    let a = DVector::from_column_slice(alpha);
    let ga = gram * &a;
    let aga = a.dot(&ga);
    (0..alpha.len()).map(|k| (gram[(k, k)] - 2.0 * ga[k] + aga).max(0.0).sqrt()).collect()
}

/// Weiszfeld iteration `αₖ ∝ 1/‖pₖ − π‖` from uniform weights. A subset at
/// zero distance from the current mixture ends the iteration with all weight
/// on it, split evenly if several subsets coincide there. When `max_iters` is
/// reached the iterate with the smallest objective is returned, unconverged.
pub fn weiszfeld_gm(subsets: &[Arc<SubsetPosteriorSamples>], config: &WeiszfeldConfig) -> Result<GeometricMedianPosterior> {
    let k = subsets.len();
    if k < 2 {
        return Err(Error::InvalidInput("geometric median needs at least two subsets".into()));
    }
    let q = subsets[0].draws.ncols();
    if subsets.iter().any(|s| s.draws.nrows() < 2 || s.draws.ncols() != q) {
        return Err(Error::DimensionMismatch("subset samples need at least two draws and a common width".into()));
    }
    let sets: Vec<&DMatrix<f64>> = subsets.iter().map(|s| &s.draws).collect();
    let h = resolve_bandwidth(config.bandwidth, &sets)?;
    let gram = embedding_gram(&sets, h);
    let scale = gram.diagonal().amax().max(f64::MIN_POSITIVE).sqrt();
    let zero = 1e-12 * scale;

    let mut alpha = vec![1.0 / k as f64; k];
    let mut dist = mixture_distances(&gram, &alpha);
    let mut trace = vec![dist.iter().sum::<f64>()];
    let mut best = (trace[0], alpha.clone());
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        if dist.iter().all(|&d| d <= zero) {
            converged = true;
            break;
        }
        let hits = dist.iter().filter(|&&d| d <= zero).count();
        if hits > 0 {
            alpha = dist.iter().map(|&d| if d <= zero { 1.0 / hits as f64 } else { 0.0 }).collect();
            dist = mixture_distances(&gram, &alpha);
            trace.push(dist.iter().sum());
            iterations += 1;
            converged = true;
            break;
        }
        let inv: Vec<f64> = dist.iter().map(|d| 1.0 / d).collect();
        let total: f64 = inv.iter().sum();
        let next: Vec<f64> = inv.iter().map(|v| v / total).collect();
        let change = next.iter().zip(&alpha).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        alpha = next;
        dist = mixture_distances(&gram, &alpha);
        trace.push(dist.iter().sum());
        iterations += 1;
        if trace[iterations] < best.0 {
            best = (trace[iterations], alpha.clone());
        }
        if change <= config.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        alpha = best.1;
    }
    let total: f64 = alpha.iter().sum();
    alpha.iter_mut().for_each(|a| *a /= total);
    Ok(GeometricMedianPosterior {
        weights: alpha,
        iterations,
        converged,
        objective_trace: trace,
        bandwidth: h,
        components: subsets.to_vec(),
    })
}

impl GeometricMedianPosterior {
    /// `Σₖ ‖pₖ − Σⱼ αⱼpⱼ‖` for arbitrary weights, with this fit's bandwidth.
    pub fn objective(&self, alpha: &[f64]) -> f64 {
        let sets: Vec<&DMatrix<f64>> = self.components.iter().map(|s| &s.draws).collect();
        mixture_distances(&embedding_gram(&sets, self.bandwidth), alpha).iter().sum()
    }
}

/// Mixture draws: component `k` with probability `αₖ`, then a uniformly chosen
/// stored draw of that subset.
pub fn sample_gm<R: Rng + ?Sized>(gm: &GeometricMedianPosterior, draws: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if draws == 0 {
        return Err(Error::InvalidParameter("draw count must be at least 1".into()));
    }
    let pick = WeightedIndex::new(&gm.weights).map_err(|e| Error::InvalidParameter(format!("mixture weights: {e}")))?;
    let q = gm.components[0].draws.ncols();
    let mut out = DMatrix::zeros(draws, q);
    for s in 0..draws {
        let comp = &gm.components[pick.sample(rng)].draws;
        let row = rng.random_range(0..comp.nrows());
        out.row_mut(s).copy_from(&comp.row(row));
    }
    Ok(out)
}

/// Exact draws of `(β, σ²)` from a subset posterior, one row per draw.
pub fn subset_samples<R: Rng + ?Sized>(
    k: usize,
    post: &ConjugatePosterior,
    draws: usize,
    rng: &mut R,
) -> Result<SubsetPosteriorSamples> {
    let d = sample_exact(post, draws, 0.0, rng)?;
    let p = post.dim();
    let mut out = DMatrix::zeros(draws, p + 1);
    out.view_mut((0, 0), (draws, p)).copy_from(&d.gamma);
    out.column_mut(p).copy_from_slice(&d.sigma2);
    Ok(SubsetPosteriorSamples { k, draws: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conjugate::{posterior_marginalized, DenseSpdSolver, PriorCovariance, ScaledIdentity};
    use crate::geo::{correlation_matrix_self, CorrelationFamily};
    use rand_distr::StandardNormal;

    fn gaussian_set(n: usize, q: usize, mean: &[f64], sd: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, q, |_, j| {
            let z: f64 = StandardNormal.sample(&mut rng);
            mean[j] + sd * z
        })
    }

    #[test]
    fn random_partition_is_balanced() {
        let locs = LocationSet::uniform_unit_square(10, 1);
        let sets = partition_data(&locs, 2, PartitionStrategy::RandomBalanced, 3).unwrap();
        assert_eq!((sets[0].len(), sets[1].len()), (5, 5));
        for (n, k) in [(37, 4), (100, 8), (9, 9)] {
            let locs = LocationSet::uniform_unit_square(n, 2);
            let sets = partition_data(&locs, k, PartitionStrategy::RandomBalanced, 1).unwrap();
            let mut all: Vec<usize> = sets.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            let sizes: Vec<usize> = sets.iter().map(Vec::len).collect();
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn spatial_blocks_are_quadrants() {
        let mut pts = LocationSet::uniform_unit_square(200, 4).coords().to_vec();
        pts.extend([0.0, 0.0, 1.0, 1.0]);
        let locs = LocationSet::new(pts, 2).unwrap();
        let sets = partition_data(&locs, 4, PartitionStrategy::SpatialBlocks, 0).unwrap();
        for (cell, set) in sets.iter().enumerate() {
            let (qx, qy) = (cell / 2, cell % 2);
            for &i in set {
                let p = locs.point(i);
                assert_eq!(((p[0] >= 0.5) as usize, (p[1] >= 0.5) as usize), (qx, qy), "{p:?}");
            }
        }
        assert_eq!(sets.iter().map(Vec::len).sum::<usize>(), 202);
    }

    #[test]
    fn identity_covariance_summary() {
        let x = DMatrix::from_fn(6, 2, |i, j| (i + 2 * j) as f64 * 0.3 + 1.0);
        let y = DVector::from_fn(6, |i, _| i as f64);
        let s = subset_summary(0, &y, &x, &ScaledIdentity { n: 6, scale: 1.0 }, &ConjugatePrior::flat(2, 2.0, 1.0)).unwrap();
        assert!((s.minv_k.clone() - x.transpose() * &x).amax() < 1e-12);
        assert!((s.m_k.clone() - x.transpose() * &y).amax() < 1e-12);
        let zero = subset_summary(0, &DVector::zeros(6), &x, &ScaledIdentity { n: 6, scale: 1.0 }, &ConjugatePrior::flat(2, 2.0, 1.0)).unwrap();
        assert_eq!(zero.quad_k, 0.0);
    }

    #[test]
    fn summary_matches_dense_recomputation() {
        let locs = LocationSet::uniform_unit_square(40, 5);
        let v = correlation_matrix_self(&CorrelationFamily::exponential(5.0).unwrap(), &locs) + DMatrix::identity(40, 40) * 0.3;
        let x = DMatrix::from_fn(40, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 / 5.0);
        let y = DVector::from_fn(40, |i, _| (i as f64 * 0.37).sin());
        let prior = ConjugatePrior::new(DVector::from_vec(vec![1.0, 0.0, -1.0]), PriorCovariance::Proper(DMatrix::identity(3, 3) * 4.0), 2.0, 1.0).unwrap();
        let s = subset_summary(2, &y, &x, &DenseSpdSolver::new(v.clone()).unwrap(), &prior).unwrap();
        let vinv = v.try_inverse().unwrap();
        let prec = DMatrix::identity(3, 3) * 0.25;
        assert!((s.minv_k - (&prec + x.transpose() * &vinv * &x)).amax() < 1e-12 * 100.0);
        assert!((s.m_k - (&prec * &prior.mu_beta + x.transpose() * &vinv * &y)).amax() < 1e-12 * 100.0);
        assert!((s.quad_k - (y.transpose() * &vinv * &y)[0]).abs() < 1e-12 * 100.0);
    }

    #[test]
    fn record_round_trip_is_exact() {
        let s = SubsetSummary {
            k: 3,
            n_k: 17,
            m_k: DVector::from_vec(vec![0.1, -2.0 / 3.0]),
            minv_k: DMatrix::from_row_slice(2, 2, &[1.0 / 7.0, 0.2, 0.2, 5.5]),
            quad_k: std::f64::consts::PI,
        };
        let rec = s.to_record();
        let refs: Vec<&str> = rec.iter().map(String::as_str).collect();
        assert_eq!(SubsetSummary::from_record(&refs).unwrap(), s);
        assert!(SubsetSummary::from_record(&refs[..5]).is_err());
    }

    fn block_problem(k: usize, seed: u64) -> (Vec<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)>, ConjugatePrior) {
        let fam = CorrelationFamily::exponential(6.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..k)
            .map(|b| {
                let locs = LocationSet::uniform_unit_square(30, seed * 10 + b as u64);
                let v = correlation_matrix_self(&fam, &locs) + DMatrix::identity(30, 30) * 0.2;
                let x = DMatrix::from_fn(30, 2, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() });
                let y = DVector::from_fn(30, |i, _| x[(i, 1)] * 2.0 + rng.random::<f64>());
                (y, x, v)
            })
            .collect();
        let prior = ConjugatePrior::new(DVector::from_vec(vec![0.5, 1.0]), PriorCovariance::Proper(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])), 2.0, 1.5).unwrap();
        (blocks, prior)
    }

    #[test]
    fn pooling_matches_full_data_and_single_subset() {
        let (blocks, prior) = block_problem(4, 1);
        let summaries: Vec<SubsetSummary> = blocks
            .iter()
            .enumerate()
            .map(|(k, (y, x, v))| subset_summary(k, y, x, &DenseSpdSolver::new(v.clone()).unwrap(), &prior).unwrap())
            .collect();
        let pooled = pool_exact(&summaries, &prior).unwrap();
        let seq = pool_sequential(&summaries, &prior).unwrap();
        let n = 120;
        let mut v = DMatrix::zeros(n, n);
        let mut x = DMatrix::zeros(n, 2);
        let mut y = DVector::zeros(n);
        for (b, (yb, xb, vb)) in blocks.iter().enumerate() {
            v.view_mut((30 * b, 30 * b), (30, 30)).copy_from(vb);
            x.view_mut((30 * b, 0), (30, 2)).copy_from(xb);
            y.rows_mut(30 * b, 30).copy_from(yb);
        }
        let full = posterior_marginalized(&y, &x, &DenseSpdSolver::new(v).unwrap(), &prior).unwrap();
        for post in [&pooled, &seq] {
            assert_eq!(post.a_star, full.a_star);
            assert!((post.b_star - full.b_star).abs() < 1e-10 * full.b_star);
            assert!((&post.mean - &full.mean).amax() < 1e-10);
            assert!((post.covariance_dense().unwrap() - full.covariance_dense().unwrap()).amax() < 1e-10);
        }
        let one = pool_exact(&summaries[..1], &prior).unwrap();
        let direct = posterior_marginalized(&blocks[0].0, &blocks[0].1, &DenseSpdSolver::new(blocks[0].2.clone()).unwrap(), &prior).unwrap();
        assert!((one.b_star - direct.b_star).abs() < 1e-12 * direct.b_star);
        assert!((&one.mean - &direct.mean).amax() < 1e-12);
    }

    #[test]
    fn flat_prior_sequential_pooling() {
        let (blocks, _) = block_problem(3, 2);
        let prior = ConjugatePrior::flat(2, 2.0, 1.0);
        let summaries: Vec<SubsetSummary> = blocks
            .iter()
            .enumerate()
            .map(|(k, (y, x, v))| subset_summary(k, y, x, &DenseSpdSolver::new(v.clone()).unwrap(), &prior).unwrap())
            .collect();
        let a = pool_exact(&summaries, &prior).unwrap();
        let b = pool_sequential(&summaries, &prior).unwrap();
        assert!((a.b_star - b.b_star).abs() < 1e-10 * a.b_star);
        assert!((&a.mean - &b.mean).amax() < 1e-10);
    }

    #[test]
    fn rkhs_distance_closed_forms() {
        let a = gaussian_set(50, 2, &[0.0, 0.0], 1.0, 1);
        assert!(rkhs_distance(&a, &a, Bandwidth::default()).unwrap() < 1e-7);
        let p = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        let q = DMatrix::from_row_slice(1, 2, &[0.6, 0.8]);
        let d = rkhs_distance(&p, &q, Bandwidth::default()).unwrap();
        assert!((d * d - (2.0 - 2.0 * (-1.0f64).exp())).abs() < 1e-14);
    }

    #[test]
    fn rkhs_distance_matches_gaussian_mmd() {
        // E ρ(X, X') for X, X' ~ N(μ, 1) independent, ρ = exp(−(x−y)²):
        // 1/sqrt(1 + 4) and the cross term exp(−μ²/5)/sqrt(5)
        let mu = 0.8;
        let a = gaussian_set(1500, 1, &[0.0], 1.0, 2);
        let b = gaussian_set(1500, 1, &[mu], 1.0, 3);
        let exact = 2.0 / 5f64.sqrt() * (1.0 - (-mu * mu / 5.0f64).exp());
        let d = rkhs_distance(&a, &b, Bandwidth::default()).unwrap();
        assert!((d * d - exact).abs() < 0.02, "{} vs {exact}", d * d);
    }

    #[test]
    fn rkhs_distance_is_a_metric_on_samples() {
        for seed in 0..5 {
            let a = gaussian_set(40, 2, &[0.0, 0.0], 1.0, seed);
            let b = gaussian_set(40, 2, &[0.5, 0.0], 0.7, seed + 10);
            let c = gaussian_set(40, 2, &[0.0, 1.0], 1.2, seed + 20);
            let d = |x: &DMatrix<f64>, y: &DMatrix<f64>| rkhs_distance(x, y, Bandwidth::default()).unwrap();
            assert!((d(&a, &b) - d(&b, &a)).abs() < 1e-12);
            assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
        }
        let h = rkhs_distance(&gaussian_set(30, 1, &[0.0], 5.0, 1), &gaussian_set(30, 1, &[0.0], 5.0, 2), Bandwidth::MedianHeuristic);
        assert!(h.unwrap() >= 0.0);
    }

    fn subsets(sets: Vec<DMatrix<f64>>) -> Vec<Arc<SubsetPosteriorSamples>> {
        sets.into_iter().enumerate().map(|(k, draws)| Arc::new(SubsetPosteriorSamples { k, draws })).collect()
    }

    #[test]
    fn identical_subsets_get_equal_weights() {
        let a = gaussian_set(60, 2, &[0.0, 0.0], 1.0, 4);
        let gm = weiszfeld_gm(&subsets(vec![a.clone(), a.clone(), a]), &WeiszfeldConfig::default()).unwrap();
        for w in &gm.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(gm.converged);
    }

    #[test]
    fn coincident_pair_dominates_a_remote_subset() {
        let a = gaussian_set(80, 2, &[0.0, 0.0], 0.5, 5);
        let far = gaussian_set(80, 2, &[3.0, 0.0], 0.5, 6);
        let gm = weiszfeld_gm(&subsets(vec![a.clone(), a, far]), &WeiszfeldConfig::default()).unwrap();
        assert!((gm.weights[0] - gm.weights[1]).abs() < 1e-12);
        assert!(gm.weights[0] > gm.weights[2]);
        assert!(gm.converged);
        assert!(gm.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn weights_stay_in_simplex_and_objective_decreases() {
        for seed in 0..6 {
            let sets: Vec<DMatrix<f64>> = (0..4)
                .map(|k| gaussian_set(50, 2, &[k as f64 * 0.7, (seed + k as u64) as f64 % 3.0 * 0.5], 0.6, seed * 7 + k as u64))
                .collect();
            let gm = weiszfeld_gm(&subsets(sets), &WeiszfeldConfig::default()).unwrap();
            assert!(gm.weights.iter().all(|&w| w >= 0.0));
            assert!((gm.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            assert!(gm.objective_trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        }
    }

    #[test]
    fn mixture_sampling() {
        let a = DMatrix::from_element(10, 1, 0.0);
        let b = DMatrix::from_element(10, 1, 1.0);
        let comps = subsets(vec![a, b]);
        let gm = GeometricMedianPosterior {
            weights: vec![0.0, 1.0],
            iterations: 0,
            converged: true,
            objective_trace: vec![],
            bandwidth: 1.0,
            components: comps.clone(),
        };
        let d = sample_gm(&gm, 100, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(d.iter().all(|&v| v == 1.0));
        let half = GeometricMedianPosterior { weights: vec![0.5, 0.5], ..gm };
        let s = 20_000;
        let d = sample_gm(&half, s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let freq = d.sum() / s as f64;
        assert!((freq - 0.5).abs() < 3.0 * (0.25 / s as f64).sqrt());
    }

    #[test]
    fn pooled_mean_is_weighted_subset_mean() {
        let sets = vec![
            gaussian_set(200, 2, &[0.0, 0.0], 1.0, 7),
            gaussian_set(200, 2, &[1.0, 0.5], 1.0, 8),
            gaussian_set(200, 2, &[0.3, 2.0], 1.0, 9),
        ];
        let gm = weiszfeld_gm(&subsets(sets.clone()), &WeiszfeldConfig::default()).unwrap();
        let s = 100_000;
        let d = sample_gm(&gm, s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for j in 0..2 {
            let expect: f64 = sets.iter().zip(&gm.weights).map(|(m, w)| w * m.column(j).mean()).sum();
            let col = d.column(j);
            let sd = (col.iter().map(|v| (v - col.mean()).powi(2)).sum::<f64>() / s as f64).sqrt();
            assert!((col.mean() - expect).abs() < 4.0 * sd / (s as f64).sqrt());
        }
    }

    fn grid_min(gram: &DMatrix<f64>, steps: usize) -> (f64, [f64; 3]) {
        let mut best = (f64::INFINITY, [0.0; 3]);
        for i in 0..=steps {
            for j in 0..=steps - i {
                let a = [i as f64 / steps as f64, j as f64 / steps as f64, (steps - i - j) as f64 / steps as f64];
                let obj: f64 = mixture_distances(gram, &a).iter().sum();
                if obj < best.0 {
                    best = (obj, a);
                }
            }
        }
        best
    }

    #[test]
    fn coincident_pair_matches_grid_search_objective() {
        let a = gaussian_set(60, 2, &[0.0, 0.0], 0.5, 11);
        let far = gaussian_set(60, 2, &[2.0, 0.0], 0.5, 12);
        let gm = weiszfeld_gm(&subsets(vec![a.clone(), a.clone(), far.clone()]), &WeiszfeldConfig::default()).unwrap();
        let gram = embedding_gram(&[&a, &a, &far], 1.0);
        let (obj, _) = grid_min(&gram, 200);
        assert!(gm.objective(&gm.weights) <= obj + 1e-9);
        assert!((gm.weights[0] - gm.weights[1]).abs() < 1e-12 && gm.weights[0] > gm.weights[2]);
    }

    #[test]
    fn interior_median_matches_grid_search() {
        let sets: Vec<DMatrix<f64>> = [[0.0, 0.0], [1.2, 0.0], [0.5, 1.0]]
            .iter()
            .enumerate()
            .map(|(k, c)| gaussian_set(40, 2, c, 0.3, 20 + k as u64))
            .collect();
        let refs: Vec<&DMatrix<f64>> = sets.iter().collect();
        let gram = embedding_gram(&refs, 1.0);
        let gm = weiszfeld_gm(&subsets(sets.clone()), &WeiszfeldConfig::default()).unwrap();
        let (_, grid) = grid_min(&gram, 400);
        for k in 0..3 {
            assert!((gm.weights[k] - grid[k]).abs() <= 1.0 / 400.0 + 1e-6, "{:?} vs {grid:?}", gm.weights);
        }
    }

    #[test]
    fn iteration_cap_is_flagged() {
        let sets: Vec<DMatrix<f64>> = (0..3).map(|k| gaussian_set(30, 1, &[k as f64 * k as f64], 0.4, 30 + k as u64)).collect();
        let config = WeiszfeldConfig { max_iters: 1, tol: 0.0, ..Default::default() };
        let gm = weiszfeld_gm(&subsets(sets), &config).unwrap();
        assert!(!gm.converged);
        assert_eq!(gm.iterations, 1);
        assert!((gm.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
