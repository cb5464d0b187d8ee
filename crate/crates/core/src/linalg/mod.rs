//! Sparse matrices and the direct/iterative solvers the time stepper needs.

mod csr;
mod order;
mod solve;

pub use csr::{axpy, dot, norm2, norm_inf, CsrMatrix};
pub use order::reverse_cuthill_mckee;
pub use solve::{cg_metric, min_generalized_eigenvalue, sherman_morrison, BandLu, Factorization, DENSE_LIMIT};
