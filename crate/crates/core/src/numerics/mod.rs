//! Dense tensors, seeded random streams and small-matrix linear algebra.

mod linalg;
mod rng;
mod tensor;

pub use linalg::{
    check_symmetric, gaussian_stats, psd_sqrt, sym_eigen, symmetrize, trace_sqrt_product, GaussianStats, SymEigen,
    SYMMETRY_TOL,
};
pub use rng::{derive_seed, Rng};
pub use tensor::{matmul, matmul_nt, matmul_tn, Tensor};

pub(crate) use tensor::{dot, gemm_nn, gemm_nt, gemm_tn};
