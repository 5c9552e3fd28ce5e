//! Differentiable forward skinning for articulated neural implicit shapes.
//!
//! A shape is represented in a pose-independent canonical space by two small
//! networks: an occupancy field and a skinning-weight field. Posed (deformed)
//! points are mapped back to the canonical space by solving the forward linear
//! blend skinning equation with Broyden iterations from one initial guess per
//! bone, and gradients through those roots are obtained by implicit
//! differentiation, so both networks train end-to-end from posed observations.
//!
//! Module map:
//!
//! - [`nn`]: minimal MLP with analytic backward passes and the checkpoint format.
//! - [`skeleton`]: rigid bone transforms, skinning weights and the LBS field.
//! - [`rootfind`]: Broyden solver and multi-start correspondence search.
//! - [`occupancy`]: composition over correspondences, implicit gradients and
//!   level-set extraction.
//! - [`train`]: losses, Adam, the training loop and the backward-skinning baseline.
//! - [`simdata`]: synthetic 2D stick / 3D capsule simulators and the dataset format.
//! - [`eval`]: IoU metrics, experiment orchestration and occupancy images.

mod binio;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod nn;
pub mod occupancy;
pub mod rootfind;
pub mod simdata;
pub mod skeleton;
pub mod train;

pub use error::{Error, Result};

/// Point or vector in `D`-dimensional space.
pub type Vector<const D: usize> = nalgebra::SVector<f64, D>;
/// Square `D x D` matrix.
pub type Matrix<const D: usize> = nalgebra::SMatrix<f64, D, D>;

/// Configure the global rayon pool from `SNARF_THREADS`.
///
/// Unset or unparsable values leave rayon's default (machine parallelism).
/// Calling this after the pool was initialized is a no-op.
pub fn configure_threads_from_env() {
    if let Some(n) = std::env::var("SNARF_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
