//! Scanpath prediction with a foveated working-memory transformer.
//!
//! The crate is organized bottom-up: [`numerics`] provides tensors and
//! reverse-mode autodiff, [`dataio`] reads and writes datasets and rasters,
//! [`model`] assembles the network, [`training`] and [`inference`] drive it,
//! and [`metrics`] and [`interpret`] evaluate and explain its output.

pub mod dataio;
pub mod error;
pub mod inference;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
