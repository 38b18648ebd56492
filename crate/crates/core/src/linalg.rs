//! Small dense linear-algebra helpers shared across modules.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::llt::factor::{cholesky_in_place, cholesky_in_place_scratch};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Cholesky factor of a symmetric positive definite matrix, or a descriptive error.
pub fn spd_cholesky(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{what} is {}x{}, expected square",
            m.nrows(),
            m.ncols()
        )));
    }
    Cholesky::new(m).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

/// log-determinant of the matrix factored by `chol`.
pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// In-place lower Cholesky factorization on a faer matrix (upper triangle zeroed).
///
/// Used for the large dense simulation oracle where a blocked factorization
/// matters and a second n×n copy would not fit in memory.
pub fn faer_cholesky_in_place(a: &mut faer::Mat<f64>, what: &str) -> Result<()> {
    let n = a.nrows();
    let par = faer::Par::Seq;
    let mut mem = MemBuffer::new(cholesky_in_place_scratch::<f64>(n, par, Default::default()));
    let stack = MemStack::new(&mut mem);
    cholesky_in_place(a.as_mut(), Default::default(), par, stack, Default::default())
        .map_err(|_| Error::NotPositiveDefinite(what.to_string()))?;
    for j in 1..n {
        for v in &mut a.col_as_slice_mut(j)[..j] {
            *v = 0.0;
        }
    }
    Ok(())
}

/// Symmetrize in place: `(A + Aᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn max_abs_diff_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn faer_factor_matches_nalgebra() {
        let b = DMatrix::from_fn(6, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let spd = &b * b.transpose() + DMatrix::identity(6, 6);
        let l_ref = spd_cholesky(spd.clone(), "test").unwrap().l();
        let mut a = faer::Mat::<f64>::from_fn(6, 6, |i, j| spd[(i, j)]);
        faer_cholesky_in_place(&mut a, "test").unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert!((a[(i, j)] - l_ref[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_spd_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(spd_cholesky(m.clone(), "m"), Err(Error::NotPositiveDefinite(_))));
        let mut a = faer::Mat::<f64>::from_fn(2, 2, |i, j| m[(i, j)]);
        assert!(faer_cholesky_in_place(&mut a, "m").is_err());
    }
}
