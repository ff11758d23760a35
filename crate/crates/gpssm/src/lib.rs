//! Variational inference for Gaussian process state-space models.
//!
//! The model places a GP prior on the transition function of a latent Markov
//! chain and fits an inducing-point variational posterior jointly over the
//! function and the states. Four approximate-posterior families are
//! implemented (factorised linear, factorised non-linear, U-factorised and
//! non-factorised), together with chunked trajectory sampling, a Monte Carlo
//! evidence lower bound, reverse-mode gradients, a stochastic training loop,
//! and brute-force quadrature oracles for verification at tiny scale.
//!
//! Every numeric routine is generic over [`scalar::Scalar`], so the same code
//! evaluates plainly on `f64` or records onto an [`autodiff::Tape`] for exact
//! gradients of the sampled bound.

pub mod autodiff;
pub mod elbo;
pub mod error;
pub mod gauss;
pub mod kernel;
pub mod linalg;
pub mod optim;
pub mod oracle;
pub mod posterior;
pub mod quad;
pub mod report;
pub mod sparse_gp;
pub mod ssm;
pub mod scalar;

pub use error::{Error, Result};
