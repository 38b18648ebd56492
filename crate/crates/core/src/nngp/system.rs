//! The stacked NNGP least-squares system and its normal equations.
//!
//! Rows `[y; μ_β; 0]`, design `[[X, I], [I_p, O], [O, D^{-1/2}(I−A)]]` with
//! row weights `δ⁻²`, `V_β⁻¹` and `I`. With `γ = (β, w)` the normal matrix is
//!
//! ```text
//! N = [ XᵀX/δ² + V_β⁻¹    Xᵀ/δ²            ]
//!     [ X/δ²              I/δ² + (I−A)ᵀD⁻¹(I−A) ]
//! ```
//!
//! Solves eliminate β through its p×p Schur complement so that the iterative
//! work is confined to the well-conditioned w block `C = I/δ² + Q`.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::conjugate::{ConjugatePrior, PosteriorCovariance};
use crate::error::{Error, Result};
use crate::geo::DENSE_POSTERIOR_LIMIT;
use crate::linalg::symmetrize;
use crate::sparse::CsrMatrix;

use super::factor::SparseFactor;
use super::pcg::{solve_pcg, Jacobi, LinearOperator, PcgConfig, PcgReport, Preconditioner, PreconditionerKind, SparseCholesky};

/// `C = I/δ² + (I−A)ᵀD⁻¹(I−A)` applied matrix-free.
struct WBlock<'a> {
    factor: &'a SparseFactor,
    inv_delta2: f64,
}

impl LinearOperator for WBlock<'_> {
    fn dim(&self) -> usize {
        self.factor.len()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.factor.apply_precision(x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o += xi * self.inv_delta2;
        }
    }
}

/// Full normal operator over `γ = (β, w)` in ordered positions.
pub struct NormalOperator<'a> {
    sys: &'a SparseNormalSystem,
}

impl LinearOperator for NormalOperator<'_> {
    fn dim(&self) -> usize {
        self.sys.dim()
    }

    fn apply(&self, g: &[f64], out: &mut [f64]) {
        let s = self.sys;
        let p = s.p();
        let (beta, w) = g.split_at(p);
        let (ob, ow) = out.split_at_mut(p);
        let beta_v = DVector::from_column_slice(beta);
        let w_v = DVector::from_column_slice(w);
        let top = &s.beta_block * &beta_v + s.x.tr_mul(&w_v) * s.inv_delta2;
        ob.copy_from_slice(top.as_slice());
        WBlock { factor: &s.factor, inv_delta2: s.inv_delta2 }.apply(w, ow);
        let xb = &s.x * beta_v;
        for (o, v) in ow.iter_mut().zip(xb.iter()) {
            *o += v * s.inv_delta2;
        }
    }
}

fn w_block(factor: &SparseFactor, inv_delta2: f64) -> CsrMatrix {
    factor.precision_csr().add_identity(inv_delta2)
}

#[derive(Debug)]
enum WPreconditioner {
    Jacobi(Jacobi),
    Cholesky(SparseCholesky),
}

impl WPreconditioner {
    fn get(&self) -> &dyn Preconditioner {
        match self {
            Self::Jacobi(p) => p,
            Self::Cholesky(p) => p,
        }
    }
}

/// Assembled NNGP system in ordered positions.
#[derive(Debug)]
pub struct SparseNormalSystem {
    factor: Arc<SparseFactor>,
    x: DMatrix<f64>,
    y: DVector<f64>,
    delta2: f64,
    inv_delta2: f64,
    prior: ConjugatePrior,
    prior_precision: DMatrix<f64>,
    prior_info: DVector<f64>,
    /// Lower factor of `V_β⁻¹` for perturbing the prior rows.
    prior_root: Option<DMatrix<f64>>,
    /// `XᵀX/δ² + V_β⁻¹`.
    beta_block: DMatrix<f64>,
    precond: WPreconditioner,
    /// `C⁻¹X`.
    c_inv_x: DMatrix<f64>,
    schur: Cholesky<f64, Dyn>,
    pcg: PcgConfig,
    setup: PcgReport,
}

/// Build the system for data `y`, `x` given in the original point order.
pub fn assemble_nngp_system(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    prior: &ConjugatePrior,
    factor: Arc<SparseFactor>,
    delta2: f64,
    pcg: PcgConfig,
) -> Result<SparseNormalSystem> {
    let n = factor.len();
    let p = x.ncols();
    if !(delta2 > 0.0 && delta2.is_finite()) {
        return Err(Error::InvalidParameter(format!("delta2 must be positive, got {delta2}")));
    }
    if y.len() != n || x.nrows() != n || prior.dim() != p {
        return Err(Error::DimensionMismatch(format!(
            "factor on {n} points, y has {}, X is {}x{p}, prior has {}",
            y.len(),
            x.nrows(),
            prior.dim()
        )));
    }
    let graph = factor.graph();
    let order = graph.ordering();
    let x = x.select_rows(order);
    let y = DVector::from_vec(graph.to_ordered(y.as_slice()));
    let inv_delta2 = 1.0 / delta2;
    let (prior_precision, prior_info, _) = prior.information_terms();
    let prior_root = if prior.is_flat() {
        None
    } else {
        Some(Cholesky::new(prior_precision.clone()).expect("prior precision is PD").l())
    };
    let mut beta_block = x.tr_mul(&x) * inv_delta2 + &prior_precision;
    symmetrize(&mut beta_block);

    let precond = match pcg.preconditioner {
        PreconditionerKind::Jacobi => {
            let mut diag = factor.precision_diagonal();
            for d in &mut diag {
                *d += inv_delta2;
            }
            WPreconditioner::Jacobi(Jacobi::new(&diag)?)
        }
        PreconditionerKind::SparseCholesky => {
            WPreconditioner::Cholesky(SparseCholesky::new(&w_block(&factor, inv_delta2))?)
        }
    };
    let op = WBlock { factor: &factor, inv_delta2 };
    let mut c_inv_x = DMatrix::zeros(n, p);
    let mut setup = PcgReport { iterations: 0, relative_residual: 0.0, converged: true };
    for j in 0..p {
        let (sol, rep) = solve_pcg(&op, precond.get(), x.column(j).as_slice(), &pcg)?;
        setup = setup.merge(rep.into_result()?);
        c_inv_x.column_mut(j).copy_from_slice(&sol);
    }
    // S = V_β⁻¹ + XᵀQC⁻¹X/δ², equal to N_ββ − N_βw C⁻¹ N_wβ without the cancellation
    let mut qx = DMatrix::zeros(n, p);
    for j in 0..p {
        factor.apply_precision(x.column(j).as_slice(), qx.column_mut(j).as_mut_slice());
    }
    let mut schur = &prior_precision + qx.tr_mul(&c_inv_x) * inv_delta2;
    symmetrize(&mut schur);
    let schur = Cholesky::new(schur)
        .ok_or_else(|| Error::RankDeficient("NNGP normal equations are singular in beta".into()))?;
    Ok(SparseNormalSystem {
        factor,
        x,
        y,
        delta2,
        inv_delta2,
        prior: prior.clone(),
        prior_precision,
        prior_info,
        prior_root,
        beta_block,
        precond,
        c_inv_x,
        schur,
        pcg,
        setup,
    })
}

impl SparseNormalSystem {
    pub fn n(&self) -> usize {
        self.factor.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn dim(&self) -> usize {
        self.n() + self.p()
    }

    pub fn delta2(&self) -> f64 {
        self.delta2
    }

    pub fn factor(&self) -> &Arc<SparseFactor> {
        &self.factor
    }

    pub fn pcg_config(&self) -> &PcgConfig {
        &self.pcg
    }

    /// Report of the p solves performed at assembly.
    pub fn setup_report(&self) -> PcgReport {
        self.setup
    }

    /// Nonzeros of the `(I−A)` block of the stacked design.
    pub fn i_minus_a_nnz(&self) -> usize {
        self.factor.i_minus_a_nnz()
    }

    pub fn normal_operator(&self) -> NormalOperator<'_> {
        NormalOperator { sys: self }
    }

    /// Diagonal of the full normal matrix (ordered positions).
    pub fn normal_diagonal(&self) -> Vec<f64> {
        let mut d: Vec<f64> = self.beta_block.diagonal().iter().copied().collect();
        let mut w = self.factor.precision_diagonal();
        for v in &mut w {
            *v += self.inv_delta2;
        }
        d.extend(w);
        d
    }

    /// The w block `I/δ² + (I−A)ᵀD⁻¹(I−A)` as a sparse matrix.
    pub fn w_block_csr(&self) -> CsrMatrix {
        w_block(&self.factor, self.inv_delta2)
    }

    /// Normal matrix in the original point order (small systems only).
    pub fn normal_dense(&self) -> Result<DMatrix<f64>> {
        let (n, p) = (self.n(), self.p());
        if n + p > DENSE_POSTERIOR_LIMIT {
            return Err(Error::TooLarge { n: n + p, limit: DENSE_POSTERIOR_LIMIT });
        }
        let rank = self.factor.graph().rank();
        let mut out = DMatrix::zeros(p + n, p + n);
        out.view_mut((0, 0), (p, p)).copy_from(&self.beta_block);
        let q = self.factor.precision_dense();
        out.view_mut((p, p), (n, n)).copy_from(&q);
        for i in 0..n {
            out[(p + i, p + i)] += self.inv_delta2;
            for j in 0..p {
                let v = self.x[(rank[i], j)] * self.inv_delta2;
                out[(p + i, j)] = v;
                out[(j, p + i)] = v;
            }
        }
        Ok(out)
    }

    /// `X*ᵀV⁻¹y*` in ordered positions: `(Xᵀy/δ² + V_β⁻¹μ_β, y/δ²)`.
    pub fn rhs(&self) -> (DVector<f64>, DVector<f64>) {
        let rb = self.x.tr_mul(&self.y) * self.inv_delta2 + &self.prior_info;
        let rw = &self.y * self.inv_delta2;
        (rb, rw)
    }

    /// Solve `N γ = (b_β, b_w)` in ordered positions.
    pub fn solve(&self, b_beta: &DVector<f64>, b_w: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>, PcgReport)> {
        let op = WBlock { factor: &self.factor, inv_delta2: self.inv_delta2 };
        let (x0, rep) = solve_pcg(&op, self.precond.get(), b_w.as_slice(), &self.pcg)?;
        let rep = rep.into_result()?;
        let x0 = DVector::from_vec(x0);
        let beta = self.schur.solve(&(b_beta - self.x.tr_mul(&x0) * self.inv_delta2));
        let w = x0 - &self.c_inv_x * &beta * self.inv_delta2;
        Ok((beta, w, rep))
    }

    /// `‖V^{-1/2}(y* − X*γ)‖²` for γ in ordered positions.
    pub fn weighted_residual(&self, beta: &DVector<f64>, w: &DVector<f64>) -> f64 {
        let data = (&self.y - &self.x * beta - w).norm_squared() * self.inv_delta2;
        let prior = if self.prior.is_flat() {
            0.0
        } else {
            let d = beta - &self.prior.mu_beta;
            d.dot(&(&self.prior_precision * &d))
        };
        let mut u = vec![0.0; self.n()];
        self.factor.apply_i_minus_a(w.as_slice(), &mut u);
        let latent: f64 = u.iter().zip(self.factor.d()).map(|(v, d)| v * v / d).sum();
        data + prior + latent
    }

    /// `X*ᵀV^{-1/2}ε` for standard normal `ε`: a draw with covariance `N`.
    pub fn perturbation(&self, rng: &mut dyn RngCore) -> (DVector<f64>, DVector<f64>) {
        let (n, p) = (self.n(), self.p());
        let s = self.inv_delta2.sqrt();
        let e1 = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut *rng));
        let mut rb = self.x.tr_mul(&e1) * s;
        if let Some(l) = &self.prior_root {
            let e2 = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut *rng));
            rb += l * e2;
        }
        let e3: Vec<f64> = self
            .factor
            .d()
            .iter()
            .map(|d| {
                let z: f64 = StandardNormal.sample(&mut *rng);
                z / d.sqrt()
            })
            .collect();
        let mut t = vec![0.0; n];
        self.factor.apply_i_minus_a_t(&e3, &mut t);
        let rw = DVector::from_vec(t) + e1 * s;
        (rb, rw)
    }

    /// Concatenate `(β, w)` with `w` mapped back to the original point order.
    pub fn to_original(&self, beta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let w = self.factor.graph().to_original(w.as_slice());
        DVector::from_iterator(self.dim(), beta.iter().copied().chain(w))
    }
}

/// Conditional posterior covariance `M = N⁻¹` of an NNGP system, sampled by
/// perturbation and re-solve.
#[derive(Debug)]
pub struct NngpCovariance {
    system: Arc<SparseNormalSystem>,
}

impl NngpCovariance {
    pub fn new(system: Arc<SparseNormalSystem>) -> Self {
        Self { system }
    }

    pub fn system(&self) -> &Arc<SparseNormalSystem> {
        &self.system
    }
}

impl PosteriorCovariance for NngpCovariance {
    fn dim(&self) -> usize {
        self.system.dim()
    }

    fn draw(&self, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        let (rb, rw) = self.system.perturbation(rng);
        let (beta, w, _) = self.system.solve(&rb, &rw)?;
        Ok(self.system.to_original(&beta, &w))
    }

    fn precision_dense(&self) -> Option<DMatrix<f64>> {
        self.system.normal_dense().ok()
    }

    fn covariance_dense(&self) -> Option<DMatrix<f64>> {
        self.precision_dense().and_then(|n| Cholesky::new(n)).map(|c| c.inverse())
    }
}
