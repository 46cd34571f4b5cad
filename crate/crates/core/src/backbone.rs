//! Image backbones producing four-level feature pyramids.
//!
//! A backbone maps a batch of camera images `[N, 3, H, W]` with pixel values
//! in `[0, 1]` to four maps `[N, F, H/s, W/s]` for strides 4, 8, 16 and 32.
//! Backbones are looked up by name in a [`BackboneRegistry`].

use std::collections::BTreeMap;
use std::fmt::Debug;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::Conv2d;
use crate::params::ParamStore;

/// Pyramid strides, finest first.
pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Index of the stride-8 level inside a pyramid.
pub const SPLAT_LEVEL: usize = 1;

/// Four maps `[N, F, H/s, W/s]`, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn channels(&self) -> Result<usize> {
        Ok(self.levels[0].dim(1)?)
    }

    pub fn cameras(&self) -> Result<usize> {
        Ok(self.levels[0].dim(0)?)
    }

    /// `(h, w)` of every level.
    pub fn sizes(&self) -> Result<Vec<(usize, usize)>> {
        self.levels
            .iter()
            .map(|l| Ok((l.dim(2)?, l.dim(3)?)))
            .collect()
    }

    /// The pyramid of a single camera, keeping the batch axis.
    pub fn camera(&self, index: usize) -> Result<FeaturePyramid> {
        Ok(FeaturePyramid {
            levels: self
                .levels
                .iter()
                .map(|l| l.narrow(0, index, 1))
                .collect::<candle_core::Result<_>>()?,
        })
    }

    pub fn detach(&self) -> FeaturePyramid {
        FeaturePyramid {
            levels: self.levels.iter().map(|l| l.detach()).collect(),
        }
    }
}

pub trait Backbone: Debug + Send + Sync {
    fn channels(&self) -> usize;
    fn forward(&self, images: &Tensor) -> Result<FeaturePyramid>;
}

/// Checks the input layout shared by every backbone.
pub fn check_images(images: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = images.dims4()?;
    if c != 3 {
        return Err(config_err(format!("images must have 3 channels, got {c}")));
    }
    if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
        return Err(config_err(format!("image size {h}x{w} is not divisible by 32")));
    }
    Ok((n, h, w))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub name: String,
    pub channels: usize,
    /// Internal width of the first stage; later stages double it.
    pub width: usize,
    pub frozen: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            name: "resnet-lite".into(),
            channels: 64,
            width: 16,
            frozen: false,
        }
    }
}

#[derive(Clone, Debug)]
struct ResidualDown {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Conv2d,
}

impl ResidualDown {
    fn new(p: &ParamStore, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&p.pp("conv1"), cin, cout, 3, 2, true)?,
            conv2: Conv2d::new(&p.pp("conv2"), cout, cout, 3, 1, true)?,
            shortcut: Conv2d::new(&p.pp("shortcut"), cin, cout, 1, 2, false)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv2.forward(&self.conv1.forward(x)?.relu()?)?;
        Ok((h + self.shortcut.forward(x)?)?.relu()?)
    }
}

/// Small residual network: a two-convolution stride-4 stem followed by
/// three stride-2 residual stages, each level projected to `F` channels by
/// a 1x1 lateral convolution.
#[derive(Clone, Debug)]
pub struct ResNetLite {
    stem1: Conv2d,
    stem2: Conv2d,
    stages: Vec<ResidualDown>,
    laterals: Vec<Conv2d>,
    channels: usize,
}

impl ResNetLite {
    pub fn new(p: &ParamStore, channels: usize, width: usize) -> Result<Self> {
        if channels == 0 || width == 0 {
            return Err(config_err("backbone widths must be positive"));
        }
        let widths = [width, width * 2, width * 4, width * 8];
        let stages = (1..4)
            .map(|i| ResidualDown::new(&p.pp(format!("stage{i}")), widths[i - 1], widths[i]))
            .collect::<Result<_>>()?;
        let laterals = (0..4)
            .map(|i| Conv2d::new(&p.pp(format!("lateral{i}")), widths[i], channels, 1, 1, true))
            .collect::<Result<_>>()?;
        Ok(Self {
            stem1: Conv2d::new(&p.pp("stem1"), 3, width, 3, 2, true)?,
            stem2: Conv2d::new(&p.pp("stem2"), width, width, 3, 2, true)?,
            stages,
            laterals,
            channels,
        })
    }
}

impl Backbone for ResNetLite {
    fn channels(&self) -> usize {
        self.channels
    }

    fn forward(&self, images: &Tensor) -> Result<FeaturePyramid> {
        check_images(images)?;
        let x = (images - 0.5)?;
        let mut h = self.stem2.forward(&self.stem1.forward(&x)?.relu()?)?.relu()?;
        let mut levels = vec![self.laterals[0].forward(&h)?];
        for (stage, lateral) in self.stages.iter().zip(&self.laterals[1..]) {
            h = stage.forward(&h)?;
            levels.push(lateral.forward(&h)?);
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Wraps a backbone so that no gradient reaches its weights.
#[derive(Debug)]
pub struct Frozen(pub Box<dyn Backbone>);

impl Backbone for Frozen {
    fn channels(&self) -> usize {
        self.0.channels()
    }

    fn forward(&self, images: &Tensor) -> Result<FeaturePyramid> {
        Ok(self.0.forward(images)?.detach())
    }
}

pub type BackboneBuilder = fn(&ParamStore, &BackboneConfig) -> Result<Box<dyn Backbone>>;

fn build_resnet_lite(p: &ParamStore, cfg: &BackboneConfig) -> Result<Box<dyn Backbone>> {
    Ok(Box::new(ResNetLite::new(p, cfg.channels, cfg.width)?))
}

#[derive(Clone, Debug)]
pub struct BackboneRegistry {
    builders: BTreeMap<String, BackboneBuilder>,
}

impl Default for BackboneRegistry {
    fn default() -> Self {
        let mut r = Self {
            builders: BTreeMap::new(),
        };
        r.register("resnet-lite", build_resnet_lite);
        r
    }
}

impl BackboneRegistry {
    pub fn register(&mut self, name: &str, builder: BackboneBuilder) {
        self.builders.insert(name.to_string(), builder);
    }

    pub fn names(&self) -> Vec<&str> {
        self.builders.keys().map(String::as_str).collect()
    }

    pub fn build(&self, p: &ParamStore, cfg: &BackboneConfig) -> Result<Box<dyn Backbone>> {
        let builder = self.builders.get(&cfg.name).ok_or_else(|| {
            config_err(format!(
                "unknown backbone {:?} (known: {})",
                cfg.name,
                self.names().join(", ")
            ))
        })?;
        let b = builder(p, cfg)?;
        if b.channels() != cfg.channels {
            return Err(config_err(format!(
                "backbone {:?} produced {} channels, config asks for {}",
                cfg.name,
                b.channels(),
                cfg.channels
            )));
        }
        Ok(if cfg.frozen { Box::new(Frozen(b)) } else { b })
    }
}
