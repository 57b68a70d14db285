//! Dense linear algebra: the matrix type, a symmetric eigensolver and row-wise kernels.

mod eigen;
mod kernels;
mod matrix;

pub use eigen::{sym_eig, EigenDecomposition, MAX_SWEEPS, OFF_DIAGONAL_TOLERANCE};
pub use kernels::{gelu, gelu_scalar, layernorm, softmax_rows};
pub use matrix::Matrix;
