//! Sparse factor `R⁻¹ ≈ (I−A)ᵀD⁻¹(I−A)` on the correlation scale.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geo::{CorrelationFamily, LocationSet};
use crate::sparse::CsrMatrix;

use super::neighbors::NeighborGraph;

/// Kriging weights and conditional variance of `target` given `points`:
/// `R_NN a = R_N,target`, `f = 1 − aᵀR_N,target`.
pub(crate) fn kriging_weights(family: &CorrelationFamily, points: &[&[f64]], target: &[f64]) -> Result<(Vec<f64>, f64)> {
    let k = points.len();
    if k == 0 {
        return Ok((Vec::new(), 1.0));
    }
    let r_nn = DMatrix::from_fn(k, k, |a, b| if a == b { 1.0 } else { family.between(points[a], points[b]) });
    let r_nt = DVector::from_fn(k, |a, _| family.between(points[a], target));
    let chol = Cholesky::new(r_nn)
        .ok_or_else(|| Error::NotPositiveDefinite("neighbor correlation submatrix (duplicate locations?)".into()))?;
    let a = chol.solve(&r_nt);
    let f = 1.0 - a.dot(&r_nt);
    Ok((a.as_slice().to_vec(), f))
}

/// Strictly lower-triangular `A` (row i supported on the neighbors of i) and
/// diagonal `D`, both in ordered positions.
#[derive(Debug, Clone)]
pub struct SparseFactor {
    graph: Arc<NeighborGraph>,
    coeffs: Vec<f64>,
    d: Vec<f64>,
}

pub fn build_sparse_factor(
    graph: &Arc<NeighborGraph>,
    family: &CorrelationFamily,
    locs: &LocationSet,
) -> Result<SparseFactor> {
    let n = graph.len();
    if locs.len() != n {
        return Err(Error::DimensionMismatch(format!("{} locations for a graph on {n} points", locs.len())));
    }
    let order = graph.ordering();
    let rows: Vec<Result<(Vec<f64>, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let pts: Vec<&[f64]> = graph.neighbors(i).iter().map(|&j| locs.point(order[j])).collect();
            let (a, d) = kriging_weights(family, &pts, locs.point(order[i]))?;
            if !(d > 0.0) {
                return Err(Error::NotPositiveDefinite(format!(
                    "conditional variance {d:e} at ordered point {i} (near-duplicate locations?)"
                )));
            }
            Ok((a, d))
        })
        .collect();
    let mut coeffs = Vec::with_capacity(graph.nnz());
    let mut d = Vec::with_capacity(n);
    for row in rows {
        let (a, di) = row?;
        coeffs.extend(a);
        d.push(di);
    }
    Ok(SparseFactor { graph: Arc::clone(graph), coeffs, d })
}

impl SparseFactor {
    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    pub fn graph(&self) -> &Arc<NeighborGraph> {
        &self.graph
    }

    /// Conditional variances `d_ii` in ordered positions.
    pub fn d(&self) -> &[f64] {
        &self.d
    }

    /// Row `i` of `A`: (neighbor positions, coefficients).
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let o = self.graph.offsets();
        (self.graph.neighbors(i), &self.coeffs[o[i]..o[i + 1]])
    }

    /// Nonzeros of `I − A`.
    pub fn i_minus_a_nnz(&self) -> usize {
        self.len() + self.coeffs.iter().filter(|c| **c != 0.0).count()
    }

    /// `out = (I − A) v`.
    pub fn apply_i_minus_a(&self, v: &[f64], out: &mut [f64]) {
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            let (idx, a) = self.row(i);
            *o = v[i] - idx.iter().zip(a).map(|(&j, c)| c * v[j]).sum::<f64>();
        });
    }

    /// `out = (I − A)ᵀ u`.
    pub fn apply_i_minus_a_t(&self, u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(u);
        for i in 0..self.len() {
            let (idx, a) = self.row(i);
            for (&j, c) in idx.iter().zip(a) {
                out[j] -= c * u[i];
            }
        }
    }

    /// `out = (I−A)ᵀD⁻¹(I−A) v` in ordered positions.
    pub fn apply_precision(&self, v: &[f64], out: &mut [f64]) {
        let mut t = vec![0.0; self.len()];
        self.apply_i_minus_a(v, &mut t);
        for (ti, di) in t.iter_mut().zip(&self.d) {
            *ti /= di;
        }
        self.apply_i_minus_a_t(&t, out);
    }

    /// Diagonal of the implied precision, ordered positions.
    pub fn precision_diagonal(&self) -> Vec<f64> {
        let mut diag: Vec<f64> = self.d.iter().map(|d| 1.0 / d).collect();
        for i in 0..self.len() {
            let (idx, a) = self.row(i);
            for (&j, c) in idx.iter().zip(a) {
                diag[j] += c * c / self.d[i];
            }
        }
        diag
    }

    /// Implied precision as a sparse matrix in ordered positions.
    ///
    /// Row r of `LᵀD⁻¹L` (with `L = I − A`) sums `L_ir/d_i · L_i,·` over the
    /// rows i of L that touch column r, accumulated in a dense scratch row.
    pub fn precision_csr(&self) -> CsrMatrix {
        let n = self.len();
        // column r of L: (i, L_ir) for i = r and every i listing r as a neighbor
        let mut offsets = vec![1usize; n + 1];
        offsets[0] = 0;
        for i in 0..n {
            for &j in self.row(i).0 {
                offsets[j + 1] += 1;
            }
        }
        for r in 0..n {
            offsets[r + 1] += offsets[r];
        }
        let mut touch = vec![(0usize, 0.0f64); offsets[n]];
        let mut next = offsets.clone();
        for i in 0..n {
            touch[next[i]] = (i, 1.0);
            next[i] += 1;
            let (idx, a) = self.row(i);
            for (&j, &c) in idx.iter().zip(a) {
                touch[next[j]] = (i, -c);
                next[j] += 1;
            }
        }
        let rows: Vec<Vec<(usize, f64)>> = (0..n)
            .into_par_iter()
            .map_init(
                || (vec![0.0; n], vec![usize::MAX; n]),
                |(acc, mark), r| {
                    let mut pattern = Vec::new();
                    let mut add = |c: usize, v: f64| {
                        if mark[c] != r {
                            mark[c] = r;
                            acc[c] = 0.0;
                            pattern.push(c);
                        }
                        acc[c] += v;
                    };
                    for &(i, l_ir) in &touch[offsets[r]..offsets[r + 1]] {
                        let w = l_ir / self.d[i];
                        add(i, w);
                        let (idx, a) = self.row(i);
                        for (&j, &c) in idx.iter().zip(a) {
                            add(j, -w * c);
                        }
                    }
                    pattern.sort_unstable();
                    pattern.into_iter().map(|c| (c, acc[c])).collect()
                },
            )
            .collect();
        CsrMatrix::from_sorted_rows(n, rows)
    }

    /// `I − A` as a dense matrix in ordered positions.
    pub fn i_minus_a_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::identity(n, n);
        for i in 0..n {
            let (idx, a) = self.row(i);
            for (&j, c) in idx.iter().zip(a) {
                m[(i, j)] = -c;
            }
        }
        m
    }

    /// Implied precision `(I−A)ᵀD⁻¹(I−A)`, dense, in the original point order.
    pub fn precision_dense(&self) -> DMatrix<f64> {
        let l = self.i_minus_a_dense();
        let dinv = DVector::from_iterator(self.len(), self.d.iter().map(|d| 1.0 / d));
        let q = l.transpose() * DMatrix::from_diagonal(&dinv) * &l;
        let rank = self.graph.rank();
        DMatrix::from_fn(self.len(), self.len(), |i, j| q[(rank[i], rank[j])])
    }

    /// Implied covariance (inverse of the precision), original order.
    pub fn covariance_dense(&self) -> Result<DMatrix<f64>> {
        let chol = Cholesky::new(self.precision_dense())
            .ok_or_else(|| Error::NotPositiveDefinite("implied precision".into()))?;
        Ok(chol.inverse())
    }

    /// `log det` of the implied precision.
    pub fn log_det_precision(&self) -> f64 {
        -self.d.iter().map(|d| d.ln()).sum::<f64>()
    }

    /// A draw from `N(0, Q⁻¹)` by forward substitution, original order.
    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.len();
        let mut w = vec![0.0; n];
        for i in 0..n {
            let (idx, a) = self.row(i);
            let z: f64 = StandardNormal.sample(rng);
            w[i] = idx.iter().zip(a).map(|(&j, c)| c * w[j]).sum::<f64>() + self.d[i].sqrt() * z;
        }
        DVector::from_vec(self.graph.to_original(&w))
    }
}
