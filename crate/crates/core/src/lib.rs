//! Iterative variational inference with spiking Poisson and Gaussian latents.

pub mod analysis;
pub mod cli;
pub mod data;
pub mod distributions;
pub mod dynamics;
pub mod error;
pub mod learning;
pub mod model;
pub mod numerics;

pub use error::{FondError, Result};
