//! Dense linear algebra: matrices, symmetric eigendecomposition, PCA and
//! subspace projections. Everything here is a pure function of its inputs.

mod eigen;
mod matrix;
mod pca;

pub use eigen::{sym_eig, EigenResult};
pub use matrix::Matrix;
pub use pca::{
    covariance, mean_center, numerical_rank, orthogonal_complement, orthonormalize, pca, project,
    SubspaceBasis, RANK_RTOL, ZERO_VARIANCE,
};

pub(crate) use matrix::{axpy, dot_slice, norm};
pub(crate) use pca::scrub_against;
