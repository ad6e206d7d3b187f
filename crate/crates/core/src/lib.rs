//! Multi-frame (burst) super-resolution.
//!
//! * [`imaging`] synthesizes degraded low-resolution bursts from a scene.
//! * [`classic`] reconstructs with registration, shift-and-add and Wiener restoration.
//! * [`spmc`] is the differentiable sub-pixel motion compensation fuse block.
//! * [`net`] is a small trainable encoder / motion / decoder network around it.
//! * [`quality`] holds the evaluation metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classic;
pub mod cli;
pub mod error;
mod fft;
pub mod imaging;
pub mod net;
pub mod quality;
pub mod raster;
pub mod real;
pub mod scene;
pub mod spmc;

pub use error::{Error, Result};
pub use imaging::{Boundary, Burst, BurstConfig, Decimation, MotionSpec, Psf};
pub use raster::{FlowField, Raster};
