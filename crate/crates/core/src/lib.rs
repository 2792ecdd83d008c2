//! Sequential offsetted regressions for marginal GLMs fitted to longitudinal
//! data collected under auxiliary-variable-dependent sampling.
//!
//! A fit runs in two stages. An offsetted logistic regression of the
//! auxiliary indicator Z (offset `log r`) estimates how sampling depends on
//! the response. The implied sampling ratio then tilts the population law of
//! each observation, and a GEE solves for β under that tilted law.

pub mod auxiliary;
pub mod cli;
pub mod comparators;
pub mod data;
pub mod design;
pub mod error;
pub mod family;
pub mod quadrature;
pub mod simlab;
pub mod sorfit;

pub use error::{Result, SorError};
