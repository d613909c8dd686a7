//! Rotationally invariant diffusion blocks built from coupled activations.
//!
//! The crate is `no_std` (with `alloc`) and holds every numerical piece:
//! image grids with reflecting boundaries, discrete differential operators and
//! their exact adjoints, scalar and matrix-valued coupled flux functions, the
//! explicit diffusion blocks (single operator, multi-channel, multiscale), the
//! synthetic rotated-rectangle data generator, PSNR, and the finite-difference
//! Adam trainer for the ten-parameter multiscale models.
//!
//! An explicit diffusion step `u - tau * K^T Phi(K u)` is a residual block whose
//! first convolution is `K`, whose activation is `tau * Phi`, and whose second
//! convolution is `-K^T`. The multiscale step sums `L` such paths with weights
//! `omega_l` before the skip connection, which is the ResNeXt layout:
//!
//! | diffusion block                   | network counterpart                  |
//! |-----------------------------------|--------------------------------------|
//! | `K_l` (smoothed gradient)         | first convolution of path `l`        |
//! | `tau * Phi` (coupled flux)        | activation, shared by every path     |
//! | `-omega_l * K_l^T`                | second convolution of path `l`       |
//! | identity term `u^k`               | skip connection                      |
//!
//! IO, file formats and the command line live in the companion `rotdiff` crate.
#![no_std]

extern crate alloc;

pub mod adam;
pub mod backprop;
pub mod blocks;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod flux;
pub mod grid;
pub mod model;
pub mod operators;
pub mod stencil;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::ImageGrid;
