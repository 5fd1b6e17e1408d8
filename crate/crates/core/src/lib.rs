//! Maximum-likelihood estimation of an unknown gain applied to a
//! distortion-compensated dither-modulation (DC-DM) watermarked Gaussian host.
//!
//! The crate is organised bottom-up: [`specfun`] and [`lattice`] are the
//! numeric primitives, [`model`] builds trials, [`target`] evaluates the
//! likelihood-derived cost, and [`init_est`], [`interval`], [`sampler`] and
//! [`optimizer`] form the estimation pipeline. [`analysis`] holds the
//! closed-form theory and [`harness`] drives Monte-Carlo experiments.

pub mod analysis;
pub mod error;
pub mod harness;
pub mod init_est;
pub mod interval;
pub mod lattice;
pub mod model;
pub mod optimizer;
pub mod sampler;
pub mod specfun;
pub mod target;

pub use error::{Error, Result};
