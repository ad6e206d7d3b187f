//! Trainable multi-frame super-resolution network.

mod checkpoint;
pub mod layers;
mod model;
mod train;

pub use checkpoint::*;
pub use model::*;
pub use train::*;
