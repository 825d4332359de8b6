//! Multinomial probit estimation with analytic approximations of the
//! multivariate normal distribution function.
//!
//! The crate provides, bottom up:
//!
//! - [`gauss`]: scalar Gaussian primitives (pdf, cdf, bivariate cdf, Mills
//!   ratio, bivariate truncated moments);
//! - [`approx`]: four orthant-probability approximations plus a quadrature
//!   reference oracle for dimensions up to four;
//! - [`model`]: the multinomial probit data model (utility differencing,
//!   choice probabilities, simulation, dataset I/O);
//! - [`estimate`]: pseudo-log-likelihoods, analytic gradients, a quasi-Newton
//!   maximizer, limiting pseudo-likelihoods and asymptotic-bias extraction;
//! - [`randgen`]: vine sampling of random correlation matrices and the
//!   random true-model generator;
//! - [`experiments`]: the asymptotic and finite-sample study harnesses with
//!   CSV emission.

pub mod approx;
pub mod error;
pub mod estimate;
pub mod experiments;
pub mod gauss;
pub mod model;
pub mod randgen;
mod scal;

pub use error::{Error, Result};
