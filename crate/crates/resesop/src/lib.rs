//! Regularized sequential subspace optimization (ReSeSOp) for linear inverse
//! problems with inexact forward operators.
//!
//! The crate provides:
//!
//! - forward models (discrete Radon transform, masked-Fourier SENSE, a
//!   desk-scale nonuniform DFT) behind a common linear-operator abstraction
//!   with exact adjoints, row-block suboperator views, and regularizer
//!   augmentation ([`operators`]);
//! - metric projections onto hyperplanes and stripes ([`geometry`]);
//! - the ReSeSOp solvers: sequential Kaczmarz sweeps over per-subproblem
//!   stripes and the simultaneous multi-direction update that solves a
//!   quadratic step-size system by damped Newton ([`solver`]);
//! - SVD-based redundancy diagnostics for suboperator decompositions
//!   ([`redundancy`]);
//! - dynamic-scene simulation: incompressible stationary flow through porous
//!   media, semi-Lagrangian advection, rigid motion models, and time-binned
//!   data generation ([`dynamics`]);
//! - SSIM/PSNR/MSE image metrics ([`metrics`]);
//! - binary array files, CSV reports, PGM export, and the experiment
//!   configuration consumed by the `resesop` CLI ([`io`], [`config`],
//!   [`pipeline`]).

extern crate blas_src;

pub mod config;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod operators;
pub mod pipeline;
pub mod redundancy;
pub mod solver;
pub(crate) mod vec_ops;

#[cfg(test)]
pub(crate) mod test_util;

pub use error::{Error, Result};
pub use grid::{ImageGrid, MeasurementVector, ScalarKind, SubproblemPartition};
