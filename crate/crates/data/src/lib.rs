//! Synthetic driving scenes, rendering, dataset layout, condition splits
//! and concurrent loading.

pub mod dataset;
pub mod error;
pub mod io;
pub mod loader;
pub mod render;
pub mod scene;
pub mod split;

pub use error::{DataError, Result};
pub use render::{RgbImage, Sample};
pub use scene::{Condition, SceneParams, SyntheticScene};
pub use split::{load_split, ConditionSplit};
