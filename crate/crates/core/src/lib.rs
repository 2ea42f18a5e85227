//! Automatic debiased estimation of nested-regression estimands.
//!
//! Estimands are written as a sequence of regressions and linear functional
//! maps ([`spec`]). Their Riesz representers are fitted directly by
//! minimising the Riesz loss ([`riesz`]), the regressions by sieve least
//! squares or logistic regression ([`nuisance`]), and the two are combined
//! into the efficient influence function and a cross-fit one-step estimate
//! ([`eif`]). [`sim`] provides data-generating processes with exact ground
//! truth for checking all of the above.

pub mod basis;
pub mod bench;
pub mod data;
pub mod eif;
pub mod error;
pub mod linalg;
pub mod mlp;
pub mod nuisance;
pub mod quadrature;
pub mod riesz;
pub mod rng;
pub mod sim;
pub mod spec;
pub mod verify;

pub use error::{Error, Result};
