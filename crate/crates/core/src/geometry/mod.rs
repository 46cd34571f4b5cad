//! BEV lattice, pinhole cameras, voxel-to-camera assignment and ray splatting.

mod assign;
mod camera;
mod grid;
mod splat;

pub use assign::{assign_cameras, geometry_key, AssignmentCache, CameraHit, VoxelCameraAssignment, MAX_CAMERAS_PER_VOXEL};
pub use camera::{CameraModel, CameraRecord, CameraRig, Projection, DEPTH_EPSILON};
pub use grid::BevGrid;
pub use splat::{splat_image_features, SplatPlan, SPLAT_STRIDE};

/// Projects every point through `camera`.
pub fn project_points(points: &[nalgebra::Point3<f64>], camera: &CameraModel) -> Vec<Projection> {
    points.iter().map(|p| camera.project(p)).collect()
}

/// Metric centers of all voxels, row-major in (x, y, z).
pub fn voxel_centers(grid: &BevGrid) -> Vec<nalgebra::Point3<f64>> {
    grid.voxel_centers()
}
