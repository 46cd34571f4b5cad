use std::sync::Arc;

use candle_core::{DType, Device, Tensor};

use super::assign::{VoxelCameraAssignment, MAX_CAMERAS_PER_VOXEL};
use super::camera::CameraRig;
use super::grid::BevGrid;
use crate::error::{config_err, Result};
use crate::sampler::{stack_maps, weighted_sample, MapShape, INVALID_MAP};

/// Image features are splatted from the 1/8-scale pyramid level.
pub const SPLAT_STRIDE: usize = 8;

/// Precomputed sampling pattern that pushes per-camera feature maps into
/// the voxel lattice: each voxel reads its center's projection in every
/// assigned camera and averages them.
#[derive(Clone, Debug)]
pub struct SplatPlan {
    voxels: usize,
    cameras: usize,
    feature_size: (usize, usize),
    locations: Vec<f64>,
    weights: Vec<f64>,
    map_ids: Arc<[u32]>,
    maps: Arc<[MapShape]>,
}

impl SplatPlan {
    pub fn new(grid: &BevGrid, rig: &CameraRig, assignment: &VoxelCameraAssignment) -> Result<Self> {
        let (h, w) = rig.image_size()?;
        if h % SPLAT_STRIDE != 0 || w % SPLAT_STRIDE != 0 {
            return Err(config_err(format!("image size {h}x{w} is not divisible by {SPLAT_STRIDE}")));
        }
        if assignment.len() != grid.voxel_count() {
            return Err(config_err("camera assignment does not match the grid"));
        }
        let voxels = grid.voxel_count();
        let slots = MAX_CAMERAS_PER_VOXEL;
        let mut locations = vec![0.0; voxels * slots * 2];
        let mut weights = vec![0.0; voxels * slots];
        let mut map_ids = vec![INVALID_MAP; voxels * slots];
        for v in 0..voxels {
            let n = assignment.count(v);
            for (s, hit) in assignment.hits(v).enumerate() {
                let idx = v * slots + s;
                locations[idx * 2] = (hit.u + 0.5) / w as f64;
                locations[idx * 2 + 1] = (hit.v + 0.5) / h as f64;
                weights[idx] = 1.0 / n as f64;
                map_ids[idx] = hit.camera as u32;
            }
        }
        let fs = (h / SPLAT_STRIDE, w / SPLAT_STRIDE);
        Ok(Self {
            voxels,
            cameras: rig.len(),
            feature_size: fs,
            locations,
            weights,
            map_ids: map_ids.into(),
            maps: stack_maps(&vec![fs; rig.len()]).into(),
        })
    }

    /// Expected `(H/8, W/8)` feature size.
    pub fn feature_size(&self) -> (usize, usize) {
        self.feature_size
    }

    /// `features` is `[N, F, H/8, W/8]`; returns voxel tokens `[X*Y*Z, F]`.
    pub fn splat_tokens(&self, features: &Tensor) -> Result<Tensor> {
        let (n, f, fh, fw) = features.dims4()?;
        if n != self.cameras || (fh, fw) != self.feature_size {
            return Err(config_err(format!(
                "splat expects {} feature maps of {:?}, got {n} of ({fh}, {fw})",
                self.cameras, self.feature_size
            )));
        }
        let dtype = features.dtype();
        let device = features.device();
        let values = features.permute((0, 2, 3, 1))?.reshape((n * fh * fw, 1, f))?;
        let slots = MAX_CAMERAS_PER_VOXEL;
        let locs = const_tensor(&self.locations, (self.voxels, 1, slots, 2), dtype, device)?;
        let wts = const_tensor(&self.weights, (self.voxels, 1, slots), dtype, device)?;
        let out = weighted_sample(&values, &locs, &wts, self.maps.clone(), self.map_ids.clone())?;
        Ok(out.reshape((self.voxels, f))?)
    }
}

fn const_tensor(
    v: &[f64],
    shape: impl Into<candle_core::Shape>,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    Ok(Tensor::from_slice(v, shape, device)?.to_dtype(dtype)?)
}

/// Splats 1/8-scale camera features (`[N, F, H/8, W/8]`) into a dense
/// `[F, X, Y, Z]` voxel tensor. Unassigned voxels are zero; voxels seen by
/// two cameras hold the mean of both samples.
pub fn splat_image_features(
    features: &Tensor,
    rig: &CameraRig,
    grid: &BevGrid,
    assignment: &VoxelCameraAssignment,
) -> Result<Tensor> {
    let plan = SplatPlan::new(grid, rig, assignment)?;
    let tokens = plan.splat_tokens(features)?;
    let f = tokens.dim(1)?;
    Ok(tokens
        .t()?
        .contiguous()?
        .reshape((f, grid.x_cells, grid.y_cells, grid.z_cells))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::assign::assign_cameras;
    use crate::geometry::camera::CameraModel;
    use nalgebra::Point3;

    fn two_camera_rig() -> CameraRig {
        let l = CameraModel::looking("l", Point3::new(0.0, 0.0, 1.0), 15f64.to_radians(), 0.0, 60f64.to_radians(), 32, 64).unwrap();
        let r = CameraModel::looking("r", Point3::new(0.0, 0.0, 1.0), (-15f64).to_radians(), 0.0, 60f64.to_radians(), 32, 64).unwrap();
        CameraRig::new(vec![l, r]).unwrap()
    }

    fn voxels(t: &Tensor) -> Vec<Vec<f64>> {
        // [F, X, Y, Z] -> per voxel feature vectors
        let f = t.dim(0).unwrap();
        t.reshape((f, ())).unwrap().t().unwrap().to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap()
    }

    #[test]
    fn constant_single_camera() {
        let grid = BevGrid::new((20, 20, 2), (40.0, 40.0), (0.0, 2.0)).unwrap();
        let cam = CameraModel::looking("f", Point3::new(0.0, 0.0, 1.0), 0.0, 0.0, 1.0, 32, 64).unwrap();
        let rig = CameraRig::new(vec![cam]).unwrap();
        let a = assign_cameras(&grid, &rig);
        let feats = (Tensor::ones((1, 3, 4, 8), DType::F64, &Device::Cpu).unwrap() * 2.5).unwrap();
        let out = splat_image_features(&feats, &rig, &grid, &a).unwrap();
        assert_eq!(out.dims(), &[3, 20, 20, 2]);
        for (v, vals) in voxels(&out).iter().enumerate() {
            let expected = if a.count(v) > 0 { 2.5 } else { 0.0 };
            // interior samples read exactly c; edge samples fade toward zero
            if a.count(v) == 0 {
                assert!(vals.iter().all(|&x| x == expected));
            }
        }
        let any_full = voxels(&out).iter().any(|v| v.iter().all(|&x| x == 2.5));
        assert!(any_full);
    }

    #[test]
    fn overlap_voxels_average_two_cameras() {
        let grid = BevGrid::new((20, 20, 1), (40.0, 40.0), (0.0, 2.0)).unwrap();
        let rig = two_camera_rig();
        let a = assign_cameras(&grid, &rig);
        let ones = Tensor::ones((1, 2, 4, 8), DType::F64, &Device::Cpu).unwrap();
        let feats = Tensor::cat(&[(&ones * 1.0).unwrap(), (&ones * 3.0).unwrap()], 0).unwrap();
        let out = voxels(&splat_image_features(&feats, &rig, &grid, &a).unwrap());
        let plan = SplatPlan::new(&grid, &rig, &a).unwrap();
        let mut checked = 0;
        for v in 0..grid.voxel_count() {
            if a.count(v) == 2 {
                // both samples fully interior -> exact average
                let interior = (0..2).all(|s| {
                    let x = plan.locations[(v * 2 + s) * 2] * 8.0 - 0.5;
                    let y = plan.locations[(v * 2 + s) * 2 + 1] * 4.0 - 0.5;
                    x >= 0.0 && x <= 7.0 && y >= 0.0 && y <= 3.0
                });
                if interior {
                    assert_eq!(out[v], vec![2.0, 2.0]);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn same_ray_same_feature() {
        // Camera looking straight down +x from the origin at voxel height:
        // voxels on the optical axis all project to the principal point.
        let grid = BevGrid::new((16, 1, 1), (32.0, 2.0), (0.0, 2.0)).unwrap();
        let cam = CameraModel::looking("f", Point3::new(-16.0, 0.0, 1.0), 0.0, 0.0, 1.0, 32, 64).unwrap();
        let rig = CameraRig::new(vec![cam]).unwrap();
        let a = assign_cameras(&grid, &rig);
        let feats = Tensor::arange(0f64, 64.0, &Device::Cpu).unwrap().reshape((1, 2, 4, 8)).unwrap();
        let out = voxels(&splat_image_features(&feats, &rig, &grid, &a).unwrap());
        let assigned: Vec<_> = (0..16).filter(|&v| a.count(v) == 1).collect();
        assert!(assigned.len() > 10);
        for &v in &assigned {
            assert_eq!(out[v], out[assigned[0]]);
        }
    }

    #[test]
    fn wrong_feature_shape_is_config_error() {
        let grid = BevGrid::new((4, 4, 1), (8.0, 8.0), (0.0, 2.0)).unwrap();
        let rig = two_camera_rig();
        let a = assign_cameras(&grid, &rig);
        let feats = Tensor::ones((2, 2, 5, 8), DType::F64, &Device::Cpu).unwrap();
        assert!(splat_image_features(&feats, &rig, &grid, &a).is_err());
        let feats = Tensor::ones((1, 2, 4, 8), DType::F64, &Device::Cpu).unwrap();
        assert!(splat_image_features(&feats, &rig, &grid, &a).is_err());
    }
}
