//! Dense linear algebra and Gauss–Hermite quadrature.

mod cholesky;
mod matrix;
mod quadrature;

pub use cholesky::{
    cholesky, tri_solve, CholeskyFactor, TriSide, JITTER_GROWTH, JITTER_RETRIES, JITTER_START,
    SYMMETRY_TOL,
};
pub use matrix::{dot, gemm, Matrix, Op};
pub use quadrature::{gauss_hermite, QuadratureRule, MAX_ORDER};
