//! Nearest-neighbor Gaussian process: neighbor DAG, sparse precision factor,
//! sparse normal equations and a PCG-backed exact sampler.

pub mod factor;
pub mod fit;
pub mod neighbors;
pub mod ordering;
pub mod pcg;
pub mod system;

pub use factor::{build_sparse_factor, SparseFactor};
pub use fit::{fit_conjugate_nngp, nngp_posterior, simulate_nngp, NngpFit, NngpModel};
pub use neighbors::{build_neighbor_graph, NeighborGraph};
pub use ordering::{order_locations, CoordinateOrder, IdentityOrder, OrderingStrategy, RandomOrder};
pub use pcg::{solve_pcg, IdentityPreconditioner, Jacobi, LinearOperator, PcgConfig, PcgReport, Preconditioner, PreconditionerKind,
    SparseCholesky};
pub use system::{assemble_nngp_system, NngpCovariance, NormalOperator, SparseNormalSystem};
