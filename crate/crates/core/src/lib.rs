//! Binary neural networks with Bayesian dropout and variational inference,
//! simulated on spintronic compute-in-memory crossbars.

pub mod binarize;
pub mod checkpoint;
pub mod config;
pub mod crossbar;
pub mod device;
pub mod dropout;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod resource;
pub mod rng;
pub mod train;
pub mod vi;

pub use error::{Error, Result};
