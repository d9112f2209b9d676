//! Numerical foundations: dense matrices, factorizations, named random
//! streams, and the distribution samplers built on top of them.

pub mod mat;
pub mod rng;
pub mod samplers;

pub use mat::{
    dot, invert_lower, solve_lower, solve_lower_transpose, symmetric_eigen, Cholesky, Mat,
    SpdMatrix,
};
pub use rng::RngStream;
pub use samplers::{
    sample_categorical, sample_dirichlet, sample_inverse_gamma, sample_inverse_wishart, sample_mvn,
};
