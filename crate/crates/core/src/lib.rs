//! Metropolis-Hastings samplers for dyadic tree posteriors in Haar wavelet
//! regression, together with an exact finite-chain oracle for mixing-rate
//! quantities (spectral gap, conductance, canonical-path congestion, drift)
//! and an experiment harness with convergence diagnostics.

pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod haar;
pub mod kernels;
pub mod oracle;
pub mod posterior;
pub mod tree;

pub use error::{Error, Result};
