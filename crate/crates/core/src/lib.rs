//! Interactive 3D segmentation: a convolutional encoder proposes an
//! automatic mask, and an attention-based refiner corrects it from user
//! clicks.

pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod interaction;
mod io;
pub mod metrics;
pub mod model;
pub mod refiner;
pub mod rng;
pub mod service;
pub mod session;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
