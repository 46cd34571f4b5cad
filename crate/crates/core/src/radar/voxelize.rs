use std::collections::BTreeMap;

use nalgebra::Point3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::cloud::{RadarPointCloud, RADAR_ATTRIBUTES};
use crate::error::{config_err, Result};
use crate::geometry::BevGrid;

/// Radar points grouped by voxel, at most `cap` per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelizedRadar {
    pub dims: (usize, usize, usize),
    pub cap: usize,
    /// Occupied flat voxel indices, ascending.
    pub voxels: Vec<usize>,
    /// Kept points per occupied voxel, in input order.
    pub points: Vec<Vec<[f64; RADAR_ATTRIBUTES]>>,
    /// Points outside the grid.
    pub dropped: usize,
}

impl VoxelizedRadar {
    pub fn empty(grid: &BevGrid, cap: usize) -> Self {
        Self {
            dims: (grid.x_cells, grid.y_cells, grid.z_cells),
            cap,
            voxels: Vec::new(),
            points: Vec::new(),
            dropped: 0,
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn occupancy(&self) -> Vec<bool> {
        let mut occ = vec![false; self.voxel_count()];
        for &v in &self.voxels {
            occ[v] = true;
        }
        occ
    }

    /// Occupancy projected over height: a BEV cell is occupied if any of its
    /// voxels is.
    pub fn bev_occupancy(&self) -> Vec<bool> {
        let mut occ = vec![false; self.dims.0 * self.dims.1];
        for &v in &self.voxels {
            occ[v / self.dims.2] = true;
        }
        occ
    }

    pub fn count(&self, voxel: usize) -> usize {
        self.voxels
            .binary_search(&voxel)
            .map(|i| self.points[i].len())
            .unwrap_or(0)
    }

    pub fn max_count(&self) -> usize {
        self.points.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Groups points by voxel (half-open cells), drops out-of-grid points and
/// keeps a uniform random subset of `cap` points in overfull voxels. The
/// subset depends only on `seed`, the voxel index and the voxel's points.
pub fn voxelize_radar(cloud: &RadarPointCloud, grid: &BevGrid, cap: usize, seed: u64) -> Result<VoxelizedRadar> {
    if cap == 0 {
        return Err(config_err("radar points per voxel must be at least 1"));
    }
    let mut groups: BTreeMap<usize, Vec<[f64; RADAR_ATTRIBUTES]>> = BTreeMap::new();
    let mut dropped = 0;
    for p in &cloud.points {
        match grid.locate(&Point3::new(p[0], p[1], p[2])) {
            Some((i, j, k)) => groups.entry(grid.voxel_index(i, j, k)).or_default().push(*p),
            None => dropped += 1,
        }
    }
    let mut out = VoxelizedRadar {
        dropped,
        ..VoxelizedRadar::empty(grid, cap)
    };
    for (voxel, pts) in groups {
        let kept = if pts.len() > cap {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (voxel as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut idx = rand::seq::index::sample(&mut rng, pts.len(), cap).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| pts[i]).collect()
        } else {
            pts
        };
        out.voxels.push(voxel);
        out.points.push(kept);
    }
    Ok(out)
}
