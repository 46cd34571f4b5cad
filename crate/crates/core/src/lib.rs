//! Camera-radar fusion network for bird's-eye-view segmentation.

pub mod attention;
pub mod backbone;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod head;
pub mod lifting;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod radar;
pub mod sampler;

pub use error::{Error, Result};
pub use model::{BevCar, ForwardOutput, ModelConfig, ModelInput};
