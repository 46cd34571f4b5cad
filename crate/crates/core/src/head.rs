//! Multi-label segmentation head and the output class registry.

use std::collections::BTreeMap;

use candle_core::Tensor;

use crate::error::{config_err, Result};
use crate::nn::Conv2d;
use crate::params::ParamStore;

pub const VEHICLE_CLASS: &str = "vehicle";

/// Map classes in output-channel order (channels `1..=7`).
pub const MAP_CLASSES: [&str; 7] = [
    "drivable_area",
    "carpark_area",
    "ped_crossing",
    "walkway",
    "stop_line",
    "road_divider",
    "lane_divider",
];

pub const DRIVABLE_CLASS: &str = "drivable_area";

/// All output channels: vehicle first, then the map classes.
pub fn output_classes() -> Vec<&'static str> {
    std::iter::once(VEHICLE_CLASS).chain(MAP_CLASSES).collect()
}

/// Class name to output channel, as stored next to checkpoints.
pub fn class_registry() -> BTreeMap<String, usize> {
    output_classes()
        .into_iter()
        .enumerate()
        .map(|(i, n)| (n.to_string(), i))
        .collect()
}

/// Checks a stored registry against the built-in channel order.
pub fn check_class_registry(stored: &BTreeMap<String, usize>) -> Result<()> {
    if *stored != class_registry() {
        return Err(config_err(format!("class order {stored:?} does not match {:?}", class_registry())));
    }
    Ok(())
}

/// Two `3x3` convolutions with ReLU, then a `1x1` convolution to one logit
/// per class. Probabilities are an elementwise sigmoid of the logits.
#[derive(Clone, Debug)]
pub struct SegmentationHead {
    conv1: Conv2d,
    conv2: Conv2d,
    out: Conv2d,
}

impl SegmentationHead {
    pub fn new(p: &ParamStore, in_channels: usize, hidden: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&p.pp("conv1"), in_channels, hidden, 3, 1, true)?,
            conv2: Conv2d::new(&p.pp("conv2"), hidden, hidden, 3, 1, true)?,
            out: Conv2d::new(&p.pp("out"), hidden, classes, 1, 1, true)?,
        })
    }

    /// `[F, X, Y] -> [classes, X, Y]` logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&x.unsqueeze(0)?)?.relu()?;
        let h = self.conv2.forward(&h)?.relu()?;
        Ok(self.out.forward(&h)?.squeeze(0)?)
    }
}
