use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Metric voxel lattice centered on the reference-frame origin in x and y,
/// spanning `[z_min, z_max]` in height.
///
/// The reference frame is x forward, y left, z up, with the origin on the
/// ground below the forward-facing camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BevGrid {
    pub x_cells: usize,
    pub y_cells: usize,
    pub z_cells: usize,
    pub x_extent: f64,
    pub y_extent: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for BevGrid {
    fn default() -> Self {
        Self {
            x_cells: 200,
            y_cells: 200,
            z_cells: 8,
            x_extent: 100.0,
            y_extent: 100.0,
            z_min: 0.0,
            z_max: 10.0,
        }
    }
}

impl BevGrid {
    pub fn new(cells: (usize, usize, usize), extent: (f64, f64), z_range: (f64, f64)) -> Result<Self> {
        let g = Self {
            x_cells: cells.0,
            y_cells: cells.1,
            z_cells: cells.2,
            x_extent: extent.0,
            y_extent: extent.1,
            z_min: z_range.0,
            z_max: z_range.1,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_cells == 0 || self.y_cells == 0 || self.z_cells == 0 {
            return Err(config_err("grid cell counts must be positive"));
        }
        let (dx, dy, dz) = self.cell_size();
        if !(dx > 0.0 && dy > 0.0 && dz > 0.0) || !(dx.is_finite() && dy.is_finite() && dz.is_finite()) {
            return Err(config_err(format!(
                "grid cell sizes must be strictly positive, got ({dx}, {dy}, {dz})"
            )));
        }
        Ok(())
    }

    pub fn cell_size(&self) -> (f64, f64, f64) {
        (
            self.x_extent / self.x_cells as f64,
            self.y_extent / self.y_cells as f64,
            (self.z_max - self.z_min) / self.z_cells as f64,
        )
    }

    pub fn bev_cells(&self) -> usize {
        self.x_cells * self.y_cells
    }

    pub fn voxel_count(&self) -> usize {
        self.x_cells * self.y_cells * self.z_cells
    }

    /// Flat voxel index, row-major in (x, y, z).
    pub fn voxel_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.y_cells + j) * self.z_cells + k
    }

    pub fn voxel_coords(&self, index: usize) -> (usize, usize, usize) {
        let k = index % self.z_cells;
        let cell = index / self.z_cells;
        (cell / self.y_cells, cell % self.y_cells, k)
    }

    pub fn cell_center_xy(&self, i: usize, j: usize) -> (f64, f64) {
        let (dx, dy, _) = self.cell_size();
        (
            -0.5 * self.x_extent + (i as f64 + 0.5) * dx,
            -0.5 * self.y_extent + (j as f64 + 0.5) * dy,
        )
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Point3<f64> {
        let (x, y) = self.cell_center_xy(i, j);
        let (_, _, dz) = self.cell_size();
        Point3::new(x, y, self.z_min + (k as f64 + 0.5) * dz)
    }

    /// Centers of all voxels in flat-index order.
    pub fn voxel_centers(&self) -> Vec<Point3<f64>> {
        let mut out = Vec::with_capacity(self.voxel_count());
        for i in 0..self.x_cells {
            for j in 0..self.y_cells {
                for k in 0..self.z_cells {
                    out.push(self.voxel_center(i, j, k));
                }
            }
        }
        out
    }

    /// Voxel containing `p`; cells are half-open `[lo, hi)` along every axis.
    pub fn locate(&self, p: &Point3<f64>) -> Option<(usize, usize, usize)> {
        let (dx, dy, dz) = self.cell_size();
        let fi = ((p.x + 0.5 * self.x_extent) / dx).floor();
        let fj = ((p.y + 0.5 * self.y_extent) / dy).floor();
        let fk = ((p.z - self.z_min) / dz).floor();
        let in_range = |f: f64, n: usize| f.is_finite() && f >= 0.0 && f < n as f64;
        if in_range(fi, self.x_cells) && in_range(fj, self.y_cells) && in_range(fk, self.z_cells) {
            Some((fi as usize, fj as usize, fk as usize))
        } else {
            None
        }
    }

    /// Normalized `[0,1]²` location of a BEV cell center on the plane map,
    /// where map rows run along x and columns along y.
    pub fn cell_normalized(&self, i: usize, j: usize) -> [f64; 2] {
        [
            (j as f64 + 0.5) / self.y_cells as f64,
            (i as f64 + 0.5) / self.x_cells as f64,
        ]
    }
}
