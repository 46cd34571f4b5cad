use candle_core::{DType, Tensor};

use super::cloud::RADAR_ATTRIBUTES;
use super::voxelize::VoxelizedRadar;
use crate::error::{config_err, shape_err, Result};
use crate::nn::{Conv2d, LayerNorm, Linear};
use crate::params::ParamStore;

/// Shared per-point fully connected stack. Each layer is
/// `Linear -> [LayerNorm] -> GELU`; points never exchange information.
#[derive(Clone, Debug)]
pub struct PointEncoder {
    layers: Vec<(Linear, Option<LayerNorm>)>,
    out_dim: usize,
}

impl PointEncoder {
    /// `widths` starts at the input attribute count, e.g. `[6, F/2, F]`.
    pub fn new(p: &ParamStore, widths: &[usize], normalize: bool) -> Result<Self> {
        if widths.len() < 2 || widths[0] != RADAR_ATTRIBUTES {
            return Err(config_err(format!(
                "point encoder widths must start at {RADAR_ATTRIBUTES} and have at least one layer"
            )));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let lp = p.pp(format!("layer{i}"));
                let lin = Linear::new(&lp.pp("fc"), w[0], w[1], true)?;
                let norm = if normalize { Some(LayerNorm::new(&lp.pp("norm"), w[1])?) } else { None };
                Ok((lin, norm))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            out_dim: *widths.last().unwrap(),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `[.., 6] -> [.., F]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (lin, norm) in &self.layers {
            h = lin.forward(&h)?;
            if let Some(n) = norm {
                h = n.forward(&h)?;
            }
            h = h.gelu_erf()?;
        }
        Ok(h)
    }
}

/// Per-point features of every occupied voxel, padded to the largest count.
#[derive(Clone, Debug)]
pub struct PointFeatures {
    /// `[V, P_max, F]`; padding rows hold unspecified values.
    pub features: Tensor,
    pub counts: Vec<usize>,
}

/// Runs the shared point encoder over every buffered point.
pub fn encode_points(voxels: &VoxelizedRadar, encoder: &PointEncoder, dtype: DType, device: &candle_core::Device) -> Result<PointFeatures> {
    let v = voxels.voxels.len();
    let p_max = voxels.max_count().max(1);
    let mut buf = vec![0.0f64; v * p_max * RADAR_ATTRIBUTES];
    for (vi, pts) in voxels.points.iter().enumerate() {
        for (pi, pt) in pts.iter().enumerate() {
            let off = (vi * p_max + pi) * RADAR_ATTRIBUTES;
            buf[off..off + RADAR_ATTRIBUTES].copy_from_slice(pt);
        }
    }
    let x = Tensor::from_vec(buf, (v, p_max, RADAR_ATTRIBUTES), device)?.to_dtype(dtype)?;
    Ok(PointFeatures {
        features: encoder.forward(&x)?,
        counts: voxels.points.iter().map(Vec::len).collect(),
    })
}

/// Elementwise max over each voxel's real points: `[V, P_max, F] -> [V, F]`.
pub fn pool_voxels(pf: &PointFeatures) -> Result<Tensor> {
    let (v, p_max, f) = pf.features.dims3()?;
    if pf.counts.len() != v {
        return Err(shape_err("point counts do not match the feature buffer"));
    }
    if pf.counts.iter().any(|&c| c == 0 || c > p_max) {
        return Err(shape_err("every pooled voxel needs between 1 and P_max points"));
    }
    let mask: Vec<u8> = pf
        .counts
        .iter()
        .flat_map(|&c| (0..p_max).map(move |i| u8::from(i < c)))
        .collect();
    let dev = pf.features.device();
    let mask = Tensor::from_vec(mask, (v, p_max, 1), dev)?.broadcast_as((v, p_max, f))?;
    let floor = Tensor::full(f32::MIN, (v, p_max, f), dev)?.to_dtype(pf.features.dtype())?;
    Ok(mask.where_cond(&pf.features, &floor)?.max(1)?)
}

/// Collapses the height axis: `3x3` conv over (x, y) with `Z*F` input
/// channels, ReLU, then a `1x1` conv to `F` channels.
#[derive(Clone, Debug)]
pub struct HeightCompressor {
    spatial: Conv2d,
    mix: Conv2d,
    z_cells: usize,
    channels: usize,
}

impl HeightCompressor {
    pub fn new(p: &ParamStore, z_cells: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            spatial: Conv2d::new(&p.pp("spatial"), z_cells * channels, channels, 3, 1, true)?,
            mix: Conv2d::new(&p.pp("mix"), channels, channels, 1, 1, true)?,
            z_cells,
            channels,
        })
    }

    /// `[F, X, Y, Z] -> [F, X, Y]`.
    pub fn forward(&self, voxel_features: &Tensor) -> Result<Tensor> {
        let (f, x, y, z) = voxel_features.dims4()?;
        if f != self.channels || z != self.z_cells {
            return Err(shape_err(format!(
                "height compressor built for F={} Z={}, got F={f} Z={z}",
                self.channels, self.z_cells
            )));
        }
        let stacked = voxel_features.permute((3, 0, 1, 2))?.reshape((1, z * f, x, y))?;
        self.forward_stacked(&stacked)
    }

    /// Input already arranged as `[1, Z*F, X, Y]` with channel `k*F + f`.
    pub fn forward_stacked(&self, stacked: &Tensor) -> Result<Tensor> {
        let h = self.spatial.forward(stacked)?.relu()?;
        Ok(self.mix.forward(&h)?.squeeze(0)?)
    }
}

/// Point encoder, voxel max pooling and height compression producing `f_rad`.
#[derive(Clone, Debug)]
pub struct RadarEncoder {
    pub points: PointEncoder,
    pub compressor: HeightCompressor,
}

impl RadarEncoder {
    pub fn new(p: &ParamStore, z_cells: usize, channels: usize) -> Result<Self> {
        let half = (channels / 2).max(1);
        Ok(Self {
            points: PointEncoder::new(&p.pp("points"), &[RADAR_ATTRIBUTES, half, channels], true)?,
            compressor: HeightCompressor::new(&p.pp("height"), z_cells, channels)?,
        })
    }

    /// Dense voxel features `[X*Y*Z, F]` (zero where no radar point fell).
    pub fn voxel_features(&self, voxels: &VoxelizedRadar, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
        let f = self.points.out_dim();
        let n = voxels.voxel_count();
        let dense = Tensor::zeros((n, f), dtype, device)?;
        if voxels.voxels.is_empty() {
            return Ok(dense);
        }
        let pooled = pool_voxels(&encode_points(voxels, &self.points, dtype, device)?)?;
        let ids: Vec<u32> = voxels.voxels.iter().map(|&v| v as u32).collect();
        let ids = Tensor::from_vec(ids, voxels.voxels.len(), device)?;
        Ok(dense.index_add(&ids, &pooled, 0)?)
    }

    /// `f_rad` as `[F, X, Y]`.
    pub fn forward(&self, voxels: &VoxelizedRadar, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
        let (x, y, z) = voxels.dims;
        let f = self.points.out_dim();
        let dense = self.voxel_features(voxels, dtype, device)?;
        let stacked = dense.reshape((x, y, z * f))?.permute((2, 0, 1))?.unsqueeze(0)?;
        self.compressor.forward_stacked(&stacked)
    }
}
