use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use super::camera::CameraRig;
use super::grid::BevGrid;

/// At most this many cameras observe one voxel.
pub const MAX_CAMERAS_PER_VOXEL: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraHit {
    pub camera: usize,
    pub u: f64,
    pub v: f64,
}

/// Per-voxel list of observing cameras (0, 1 or 2 hits), in flat voxel order.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelCameraAssignment {
    hits: Vec<[Option<CameraHit>; MAX_CAMERAS_PER_VOXEL]>,
}

impl VoxelCameraAssignment {
    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn hits(&self, voxel: usize) -> impl Iterator<Item = &CameraHit> {
        self.hits[voxel].iter().flatten()
    }

    pub fn slot(&self, voxel: usize, slot: usize) -> Option<&CameraHit> {
        self.hits[voxel][slot].as_ref()
    }

    pub fn cameras(&self, voxel: usize) -> Vec<usize> {
        self.hits(voxel).map(|h| h.camera).collect()
    }

    pub fn count(&self, voxel: usize) -> usize {
        self.hits(voxel).count()
    }

    /// BEV cells with at least one assigned voxel, row-major.
    pub fn observed_cells(&self, grid: &BevGrid) -> Vec<bool> {
        (0..grid.bev_cells())
            .map(|cell| (0..grid.z_cells).any(|k| self.count(cell * grid.z_cells + k) > 0))
            .collect()
    }

    /// BEV cells with at least one voxel assigned to `camera`.
    pub fn cells_seen_by(&self, grid: &BevGrid, camera: usize) -> Vec<bool> {
        (0..grid.bev_cells())
            .map(|cell| {
                (0..grid.z_cells).any(|k| self.hits(cell * grid.z_cells + k).any(|h| h.camera == camera))
            })
            .collect()
    }
}

/// Assigns every voxel center to the cameras whose image it projects into.
/// When more than two cameras see a voxel, the two whose projections are
/// closest to their image centers are kept; hits are listed by camera index.
pub fn assign_cameras(grid: &BevGrid, rig: &CameraRig) -> VoxelCameraAssignment {
    let centers = grid.voxel_centers();
    let hits = centers
        .iter()
        .map(|p| {
            let mut seen: Vec<(f64, CameraHit)> = rig
                .cameras
                .iter()
                .enumerate()
                .filter_map(|(idx, cam)| {
                    let proj = cam.project(p);
                    proj.valid.then(|| {
                        let du = proj.u - 0.5 * cam.width as f64;
                        let dv = proj.v - 0.5 * cam.height as f64;
                        (du * du + dv * dv, CameraHit { camera: idx, u: proj.u, v: proj.v })
                    })
                })
                .collect();
            if seen.len() > MAX_CAMERAS_PER_VOXEL {
                seen.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.camera.cmp(&b.1.camera)));
                seen.truncate(MAX_CAMERAS_PER_VOXEL);
                seen.sort_by_key(|s| s.1.camera);
            }
            let mut slots = [None; MAX_CAMERAS_PER_VOXEL];
            for (slot, (_, hit)) in slots.iter_mut().zip(seen) {
                *slot = Some(hit);
            }
            slots
        })
        .collect();
    VoxelCameraAssignment { hits }
}

/// Memoizes [`assign_cameras`] per (grid, calibration) pair.
#[derive(Default)]
pub struct AssignmentCache {
    entries: Mutex<HashMap<[u8; 32], Arc<VoxelCameraAssignment>>>,
}

impl AssignmentCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, grid: &BevGrid, rig: &CameraRig) -> Arc<VoxelCameraAssignment> {
        let key = geometry_key(grid, rig);
        if let Some(hit) = self.entries.lock().expect("cache poisoned").get(&key) {
            return hit.clone();
        }
        let assignment = Arc::new(assign_cameras(grid, rig));
        self.entries
            .lock()
            .expect("cache poisoned")
            .insert(key, assignment.clone());
        assignment
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Content hash of a grid and calibration, used as a cache key.
pub fn geometry_key(grid: &BevGrid, rig: &CameraRig) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(grid).expect("grid serializes"));
    h.update(rig.to_json().expect("rig serializes").as_bytes());
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::camera::CameraModel;
    use nalgebra::Point3;

    fn deg(d: f64) -> f64 {
        d.to_radians()
    }

    #[test]
    fn forward_voxel_is_assigned_to_forward_camera() {
        let grid = BevGrid::new((21, 21, 1), (42.0, 42.0), (0.0, 2.0)).unwrap();
        let cam = CameraModel::looking("f", Point3::new(0.0, 0.0, 1.0), 0.0, 0.0, deg(60.0), 64, 128).unwrap();
        let rig = CameraRig::new(vec![cam]).unwrap();
        let a = assign_cameras(&grid, &rig);
        // cell (15, 10) has center (10, 0)
        let v = grid.voxel_index(15, 10, 0);
        assert_eq!(grid.voxel_center(15, 10, 0), Point3::new(10.0, 0.0, 1.0));
        assert_eq!(a.cameras(v), vec![0]);
        // behind the camera
        let behind = grid.voxel_index(2, 10, 0);
        assert!(a.cameras(behind).is_empty());
    }

    #[test]
    fn overlapping_cameras_both_listed() {
        // Two 60° cameras yawed ±15°: their frusta overlap over 30°.
        let grid = BevGrid::new((41, 41, 1), (41.0, 41.0), (0.0, 2.0)).unwrap();
        let left = CameraModel::looking("l", Point3::new(0.0, 0.0, 1.0), deg(15.0), 0.0, deg(60.0), 64, 128).unwrap();
        let right = CameraModel::looking("r", Point3::new(0.0, 0.0, 1.0), deg(-15.0), 0.0, deg(60.0), 64, 128).unwrap();
        let rig = CameraRig::new(vec![left, right]).unwrap();
        let a = assign_cameras(&grid, &rig);
        let centers = grid.voxel_centers();
        let mut overlap = 0;
        for (idx, p) in centers.iter().enumerate() {
            let brute: Vec<usize> = rig
                .cameras
                .iter()
                .enumerate()
                .filter(|(_, c)| c.project(p).valid)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(a.cameras(idx), brute);
            if brute.len() == 2 {
                overlap += 1;
            }
        }
        assert!(overlap > 0);
        // Straight ahead at 10 m lies in the overlap.
        let ahead = grid.voxel_index(30, 20, 0);
        assert_eq!(a.cameras(ahead), vec![0, 1]);
    }

    #[test]
    fn more_than_two_keeps_most_central() {
        let grid = BevGrid::new((1, 1, 1), (1.0, 1.0), (0.0, 2.0)).unwrap();
        // Voxel center (0, 0, 1); three cameras behind it looking forward at it,
        // with increasing yaw so it drifts away from the image center.
        let cams = [0.0, 10.0, -20.0]
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                CameraModel::looking(format!("c{i}"), Point3::new(-10.0, 0.0, 1.0), deg(y), 0.0, deg(90.0), 64, 128).unwrap()
            })
            .collect();
        let rig = CameraRig::new(cams).unwrap();
        let a = assign_cameras(&grid, &rig);
        assert_eq!(a.cameras(0), vec![0, 1]);
    }

    #[test]
    fn cache_returns_same_assignment() {
        let grid = BevGrid::new((10, 10, 2), (20.0, 20.0), (0.0, 4.0)).unwrap();
        let rig = CameraRig::surround(64, 128).unwrap();
        let cache = AssignmentCache::new();
        let a = cache.get(&grid, &rig);
        let b = cache.get(&grid, &rig);
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(*a, assign_cameras(&grid, &rig));
        assert_eq!(cache.len(), 1);
    }
}
