//! Multilevel Monte Carlo for fluctuations of the finite-difference
//! Dean-Kawasaki equation on the periodic torus `[-pi, pi)^d`.

pub mod cli;
pub mod dk;
pub mod error;
pub mod grid;
pub mod mlmc;
pub mod noise;
pub mod pde;
pub mod qoi;
pub mod spectral;
pub mod stats;

pub use error::{DkError, Result};
