//! Differentiable 3D Gaussian splatting with pixel-wise expected
//! information gain for view extrapolation.

pub mod config;
pub mod error;
pub mod fisher;
pub mod fixtures;
pub mod formats;
pub mod gradients;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod persist;
pub mod protocol;
pub mod rasterizer;
pub mod restorer;
pub mod scene;
pub mod sh;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
