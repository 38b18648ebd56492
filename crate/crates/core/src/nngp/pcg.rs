//! Preconditioned conjugate gradients for symmetric positive definite systems.

use faer::linalg::solvers::SolveCore;
use faer::sparse::linalg::solvers::Llt;
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, MatMut, Side};
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::sparse::CsrMatrix;

pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    /// `out = A x`.
    fn apply(&self, x: &[f64], out: &mut [f64]);
}

pub trait Preconditioner: Sync {
    /// `z = P⁻¹ r`.
    fn apply(&self, r: &[f64], z: &mut [f64]);
}

impl LinearOperator for CsrMatrix {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.matvec(x, out);
    }
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityPreconditioner;

impl Preconditioner for IdentityPreconditioner {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
    }
}

/// Diagonal (Jacobi) preconditioner.
#[derive(Debug, Clone)]
pub struct Jacobi {
    inv_diag: Vec<f64>,
}

impl Jacobi {
    pub fn new(diag: &[f64]) -> Result<Self> {
        if let Some(d) = diag.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
            return Err(Error::Indefinite(*d));
        }
        Ok(Self { inv_diag: diag.iter().map(|d| 1.0 / d).collect() })
    }
}

impl Preconditioner for Jacobi {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        for ((zi, ri), di) in z.iter_mut().zip(r).zip(&self.inv_diag) {
            *zi = ri * di;
        }
    }
}

/// Sparse Cholesky factor of an SPD matrix, used as an exact preconditioner.
/// PCG then converges in one or two iterations and only polishes the direct
/// solve to the requested residual.
pub struct SparseCholesky {
    n: usize,
    llt: Llt<usize, f64>,
}

impl std::fmt::Debug for SparseCholesky {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SparseCholesky").field("n", &self.n).finish_non_exhaustive()
    }
}

impl SparseCholesky {
    /// Factor a symmetric matrix given in CSR form. The upper triangle of each
    /// CSR row is the lower triangle of the matching CSC column.
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let n = a.nrows();
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::with_capacity(a.nnz() / 2 + n);
        let mut vals = Vec::with_capacity(a.nnz() / 2 + n);
        col_ptr.push(0);
        for i in 0..n {
            let (cols, v) = a.row(i);
            let start = cols.partition_point(|&j| j < i);
            row_idx.extend_from_slice(&cols[start..]);
            vals.extend_from_slice(&v[start..]);
            col_ptr.push(row_idx.len());
        }
        let symbolic = SymbolicSparseColMatRef::new_checked(n, n, &col_ptr, None, &row_idx);
        let llt = SparseColMatRef::new(symbolic, &vals)
            .sp_cholesky(Side::Lower)
            .map_err(|_| Error::Indefinite(f64::NAN))?;
        Ok(Self { n, llt })
    }
}

impl Preconditioner for SparseCholesky {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
        self.llt.solve_in_place_with_conj(Conj::No, MatMut::from_column_major_slice_mut(z, self.n, 1));
    }
}

/// Preconditioner for the NNGP w-block solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PreconditionerKind {
    /// Diagonal scaling. Cheap to build, but iteration counts grow with `n`.
    Jacobi,
    #[default]
    SparseCholesky,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcgConfig {
    /// Target relative residual `‖b − Ax‖/‖b‖`.
    pub tol: f64,
    /// Iteration cap; `None` means ten times the dimension.
    pub max_iters: Option<usize>,
    pub preconditioner: PreconditionerKind,
}

impl Default for PcgConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_iters: None, preconditioner: PreconditionerKind::default() }
    }
}

impl PcgConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcgReport {
    pub iterations: usize,
    /// Relative residual of the returned iterate, recomputed from scratch.
    pub relative_residual: f64,
    pub converged: bool,
}

impl PcgReport {
    /// Combine reports from several solves: summed iterations, worst residual.
    pub fn merge(self, other: PcgReport) -> PcgReport {
        PcgReport {
            iterations: self.iterations + other.iterations,
            relative_residual: self.relative_residual.max(other.relative_residual),
            converged: self.converged && other.converged,
        }
    }

    pub fn into_result(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged { iterations: self.iterations, residual: self.relative_residual })
        }
    }
}

fn true_residual(op: &dyn LinearOperator, rhs: &[f64], x: &[f64], r: &mut [f64]) -> f64 {
    op.apply(x, r);
    for (ri, bi) in r.iter_mut().zip(rhs) {
        *ri = bi - *ri;
    }
    norm(r)
}

/// Solve `A x = b` from a zero start.
///
/// On convergence the residual is recomputed as `b − Ax`; if recursive
/// residual drift left it above `tol`, iteration restarts from the current
/// iterate. Exceeding the iteration cap returns the best iterate seen with
/// `converged = false`. A non-positive curvature `pᵀAp` is an error.
pub fn solve_pcg(
    op: &dyn LinearOperator,
    precond: &dyn Preconditioner,
    rhs: &[f64],
    config: &PcgConfig,
) -> Result<(Vec<f64>, PcgReport)> {
    let n = op.dim();
    if rhs.len() != n {
        return Err(Error::DimensionMismatch(format!("rhs has {} entries for a {n}-dimensional system", rhs.len())));
    }
    if !(config.tol > 0.0) {
        return Err(Error::InvalidParameter(format!("PCG tolerance must be positive, got {}", config.tol)));
    }
    let max_iters = config.max_iters.unwrap_or(10 * n.max(1));
    let bnorm = norm(rhs);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok((x, PcgReport { iterations: 0, relative_residual: 0.0, converged: true }));
    }
    let mut r = rhs.to_vec();
    let mut z = vec![0.0; n];
    let mut q = vec![0.0; n];
    precond.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut best = (1.0, x.clone());
    let mut rechecks = 0;
    let mut iterations = 0;
    for it in 1..=max_iters {
        iterations = it;
        op.apply(&p, &mut q);
        let curvature = dot(&p, &q);
        if !(curvature > 0.0) {
            return Err(Error::Indefinite(curvature));
        }
        let alpha = rz / curvature;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        let mut res = norm(&r) / bnorm;
        if res <= config.tol {
            res = true_residual(op, rhs, &x, &mut r) / bnorm;
            if res <= config.tol {
                return Ok((x, PcgReport { iterations: it, relative_residual: res, converged: true }));
            }
            rechecks += 1;
            if rechecks > 3 {
                break;
            }
            precond.apply(&r, &mut z);
            p.copy_from_slice(&z);
            rz = dot(&r, &z);
            continue;
        }
        if res < best.0 {
            best.0 = res;
            best.1.copy_from_slice(&x);
        }
        precond.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let x = if best.0 < norm(&r) / bnorm { best.1 } else { x };
    let res = true_residual(op, rhs, &x, &mut r) / bnorm;
    Ok((x, PcgReport { iterations, relative_residual: res, converged: res <= config.tol }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn identity_converges_in_one_iteration() {
        let a = DMatrix::<f64>::identity(5, 5);
        let b = [1.0, -2.0, 3.0, 0.5, 4.0];
        let (x, rep) = solve_pcg(&a, &IdentityPreconditioner, &b, &PcgConfig::default()).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(rep.converged);
        assert_eq!(x, b.to_vec());
    }

    #[test]
    fn jacobi_absorbs_diagonal_systems() {
        let diag = [2.0, 5.0, 0.25, 9.0];
        let a = DMatrix::from_diagonal(&DVector::from_column_slice(&diag));
        let b = [1.0, 1.0, 1.0, 1.0];
        let (x, rep) = solve_pcg(&a, &Jacobi::new(&diag).unwrap(), &b, &PcgConfig::default()).unwrap();
        assert_eq!(rep.iterations, 1);
        for i in 0..4 {
            assert!((x[i] - 1.0 / diag[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn spd_solution_matches_direct() {
        let m = DMatrix::from_fn(30, 30, |i, j| ((i * 13 + j * 7) % 11) as f64 / 11.0 - 0.5);
        let a = &m * m.transpose() + DMatrix::identity(30, 30) * 0.5;
        let b: Vec<f64> = (0..30).map(|i| (i as f64).cos()).collect();
        let diag: Vec<f64> = a.diagonal().iter().copied().collect();
        let (x, rep) = solve_pcg(&a, &Jacobi::new(&diag).unwrap(), &b, &PcgConfig::with_tol(1e-12)).unwrap();
        assert!(rep.converged && rep.relative_residual <= 1e-12);
        let direct = a.clone().lu().solve(&DVector::from_column_slice(&b)).unwrap();
        assert!((DVector::from_vec(x) - direct).amax() < 1e-9);
    }

    #[test]
    fn indefinite_detected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let err = solve_pcg(&a, &IdentityPreconditioner, &[0.0, 1.0], &PcgConfig::default());
        assert!(matches!(err, Err(Error::Indefinite(_))));
    }

    #[test]
    fn iteration_cap_flags_non_convergence() {
        let a = DMatrix::from_diagonal(&DVector::from_fn(50, |i, _| 1.0 + i as f64));
        let b = vec![1.0; 50];
        let cfg = PcgConfig { tol: 1e-12, max_iters: Some(3), ..Default::default() };
        let (x, rep) = solve_pcg(&a, &IdentityPreconditioner, &b, &cfg).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.iterations, 3);
        assert_eq!(x.len(), 50);
        assert!(rep.relative_residual < 1.0);
        assert!(rep.into_result().is_err());
    }

    #[test]
    fn zero_rhs() {
        let a = DMatrix::<f64>::identity(3, 3);
        let (x, rep) = solve_pcg(&a, &IdentityPreconditioner, &[0.0; 3], &PcgConfig::default()).unwrap();
        assert_eq!(x, vec![0.0; 3]);
        assert_eq!(rep.iterations, 0);
    }
}
