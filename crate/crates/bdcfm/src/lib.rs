//! Bayesian dynamic clustering factor models for multivariate panel data.
//!
//! A panel of `S` subjects is observed on `R` variables at `T` common time
//! points. Each observation vector is driven by `L < R` latent factors
//! through a lower-unitriangular loading matrix, and each subject's factor
//! vector at each time belongs to one of `G` latent clusters whose label
//! evolves as a first-order Markov chain. The crate provides:
//!
//! * empirical-Bayes prior construction from the raw panel
//!   ([`ebinit::build_priors`]),
//! * a Gibbs sampler over all model unknowns ([`gibbs::run_gibbs`]),
//! * posterior summaries, cluster-assignment probabilities, and
//!   truth-comparison reports ([`posterior`]),
//! * a synthetic-panel generator for end-to-end checks ([`simgen`]),
//! * and a command-line front end (`bdcfm simulate | fit | summarize`).

pub mod cli;
pub mod ebinit;
pub mod error;
pub mod gibbs;
pub mod model;
pub mod numkit;
pub mod posterior;
pub mod simgen;

pub use error::{Error, Result};
