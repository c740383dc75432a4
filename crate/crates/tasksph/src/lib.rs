//! Task-parallel SPH mini-solver.
//!
//! A small hydrodynamics solver built around fine-grained dependent tasks:
//! density/gradient/force loops over a cubic cell tree, scheduled by a
//! work-stealing engine, with the three loops optionally routed through a
//! pack -> bundle -> stream offload pipeline against a pluggable device
//! backend. Validated on the Gresho-Chan vortex.

pub mod config;
pub mod devsim;
pub mod driver;
pub mod engine;
pub mod eos;
pub mod error;
pub mod exec;
pub mod ghost;
pub mod gresho;
pub mod kernel;
pub mod loops;
pub mod offload;
pub mod records;
pub mod system;
pub mod tree;

pub use error::SolverError;
