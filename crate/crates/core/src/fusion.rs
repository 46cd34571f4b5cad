//! Radar-camera fusion in the BEV plane and the convolutional BEV encoder.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBlock, DeformableAttentionConfig, ValueMaps};
use crate::error::{config_err, Result};
use crate::geometry::BevGrid;
use crate::lifting::cell_references;
use crate::nn::Conv2d;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub blocks: usize,
    pub heads: usize,
    pub points: usize,
    pub ffn_expansion: usize,
    /// Encoder output width; `0` means the feature width.
    pub out_channels: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            blocks: 6,
            heads: 4,
            points: 4,
            ffn_expansion: 2,
            out_channels: 0,
        }
    }
}

pub use crate::lifting::compose_queries as compose_fusion_queries;

/// Cross-attention cascade: fusion queries read the lifted image features
/// around each cell's own location. The image features are only read.
#[derive(Clone, Debug)]
pub struct Fuser {
    pub blocks: Vec<AttentionBlock>,
}

impl Fuser {
    pub fn new(p: &ParamStore, cfg: &FusionConfig, channels: usize) -> Result<Self> {
        let att = DeformableAttentionConfig {
            channels,
            heads: cfg.heads,
            points: cfg.points,
            refs: 1,
        };
        let blocks = (0..cfg.blocks)
            .map(|b| AttentionBlock::new(&p.pp(format!("block{b}")), att, cfg.ffn_expansion))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    /// `queries` and `image_bev` are `[X*Y, F]` tokens.
    pub fn forward(&self, queries: &Tensor, image_bev: &Tensor, grid: &BevGrid, chunk: Option<usize>) -> Result<Tensor> {
        if queries.dims() != image_bev.dims() || queries.dim(0)? != grid.bev_cells() {
            return Err(config_err(format!(
                "fusion expects equal [{}, F] inputs, got {:?} and {:?}",
                grid.bev_cells(),
                queries.dims(),
                image_bev.dims()
            )));
        }
        let refs = cell_references(grid);
        let values = ValueMaps::from_tokens(image_bev, grid.x_cells, grid.y_cells)?;
        let mut x = queries.clone();
        for block in &self.blocks {
            x = block.forward(&x, &refs, &values, chunk)?;
        }
        Ok(x)
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

/// Bottleneck encoder: stem, two stride-2 residual stages, then two
/// nearest-upsample stages merged with the matching skip features.
#[derive(Clone, Debug)]
pub struct BevEncoder {
    stem: Conv2d,
    down1: ResidualDown,
    down2: ResidualDown,
    up1: Conv2d,
    up2: Conv2d,
    out: Conv2d,
}

impl BevEncoder {
    pub fn new(p: &ParamStore, channels: usize, out_channels: usize) -> Result<Self> {
        let c = channels;
        Ok(Self {
            stem: Conv2d::new(&p.pp("stem"), c, c, 3, 1, true)?,
            down1: ResidualDown::new(&p.pp("down1"), c, 2 * c)?,
            down2: ResidualDown::new(&p.pp("down2"), 2 * c, 4 * c)?,
            up1: Conv2d::new(&p.pp("up1"), 4 * c, 2 * c, 3, 1, true)?,
            up2: Conv2d::new(&p.pp("up2"), 2 * c, c, 3, 1, true)?,
            out: Conv2d::new(&p.pp("out"), c, out_channels, 1, 1, true)?,
        })
    }

    /// `[F, X, Y] -> [F_out, X, Y]`; `X` and `Y` must be multiples of 4.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w) = x.dims3()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(config_err(format!("BEV encoder needs sizes divisible by 4, got {h}x{w}")));
        }
        let s0 = self.stem.forward(&x.unsqueeze(0)?)?.relu()?;
        let s1 = self.down1.forward(&s0)?;
        let s2 = self.down2.forward(&s1)?;
        let u1 = (self.up1.forward(&s2.upsample_nearest2d(h / 2, w / 2)?)? + &s1)?.relu()?;
        let u0 = (self.up2.forward(&u1.upsample_nearest2d(h, w)?)? + &s0)?.relu()?;
        Ok(self.out.forward(&u0)?.squeeze(0)?)
    }
}
