//! Hierarchical multilevel Monte Carlo for triple-nested expectations of the
//! form `P(E[f(E[g | X_t1]) | X_t0] > L)`, with a CVA risk model on top.

pub mod cva;
pub mod driver;
pub mod error;
pub mod inner;
pub mod outer;
pub mod quad;
pub mod rng;
pub mod sde;

pub use error::{Error, Result};
