//! Part-based conditional diffusion for lifting 2D whole-body keypoint
//! sequences to 3D.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod model;
pub mod objective;
pub mod skeleton;
pub mod training;

pub use error::{Error, Result};
