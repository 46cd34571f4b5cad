use std::collections::HashSet;
use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer than this to the image plane are never considered visible.
pub const DEPTH_EPSILON: f64 = 1e-3;

/// Pinhole camera. `rotation`/`translation` map reference-frame points into
/// the camera frame (x right, y down, z along the optical axis).
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub name: String,
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

impl CameraModel {
    pub fn new(
        name: impl Into<String>,
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let cam = Self {
            name: name.into(),
            intrinsics,
            rotation,
            translation,
            height,
            width,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `position` (reference frame) looking along `yaw` (radians,
    /// counter-clockwise from +x) tilted down by `pitch`, with horizontal
    /// field of view `hfov` and square pixels.
    pub fn looking(
        name: impl Into<String>,
        position: Point3<f64>,
        yaw: f64,
        pitch: f64,
        hfov: f64,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let forward = Vector3::new(yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), -pitch.sin());
        let right = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * position.coords);
        let f = 0.5 * width as f64 / (0.5 * hfov).tan();
        let intrinsics = Matrix3::new(
            f,
            0.0,
            0.5 * width as f64,
            0.0,
            f,
            0.5 * height as f64,
            0.0,
            0.0,
            1.0,
        );
        Self::new(name, intrinsics, rotation, translation, height, width)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let orth = (r * r.transpose() - Matrix3::identity()).abs().max();
        if orth > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::Calibration(format!(
                "camera {}: rotation is not a proper orthonormal matrix",
                self.name
            )));
        }
        let k = &self.intrinsics;
        let (fx, fy, cx, cy) = (k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)]);
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Calibration(format!("camera {}: focal lengths must be positive", self.name)));
        }
        if !(0.0..self.width as f64).contains(&cx) || !(0.0..self.height as f64).contains(&cy) {
            return Err(Error::Calibration(format!(
                "camera {}: principal point ({cx}, {cy}) outside the {}x{} image",
                self.name, self.width, self.height
            )));
        }
        if k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::Calibration(format!("camera {}: last intrinsics row must be (0, 0, 1)", self.name)));
        }
        Ok(())
    }

    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    pub fn to_camera(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.rotation * p.coords + self.translation
    }

    pub fn project(&self, p: &Point3<f64>) -> Projection {
        let pc = self.to_camera(p);
        let depth = pc.z;
        let h = self.intrinsics * pc;
        let (u, v) = (h.x / depth, h.y / depth);
        let valid = depth > DEPTH_EPSILON
            && u >= 0.0
            && u < self.width as f64
            && v >= 0.0
            && v < self.height as f64;
        Projection { u, v, depth, valid }
    }

    /// Inverse pinhole model: pixel plus depth back to the reference frame.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Point3<f64> {
        let k_inv = self.intrinsics.try_inverse().expect("validated intrinsics are invertible");
        let pc = k_inv * Vector3::new(u, v, 1.0) * depth;
        Point3::from(self.rotation.transpose() * (pc - self.translation))
    }

    /// Unit ray direction through pixel `(u, v)` in the reference frame.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let k_inv = self.intrinsics.try_inverse().expect("validated intrinsics are invertible");
        (self.rotation.transpose() * (k_inv * Vector3::new(u, v, 1.0))).normalize()
    }

    /// Applies a rigid transform `x -> rot * x + trans` to the reference
    /// frame: returns the camera whose view of transformed points equals
    /// this camera's view of the originals.
    pub fn transformed(&self, rot: &Matrix3<f64>, trans: &Vector3<f64>) -> Self {
        let rotation = self.rotation * rot.transpose();
        let translation = self.translation - rotation * trans;
        Self {
            rotation,
            translation,
            ..self.clone()
        }
    }
}

/// Ordered set of cameras; index 0 is the forward-facing reference camera.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<CameraModel>,
}

impl CameraRig {
    pub fn new(cameras: Vec<CameraModel>) -> Result<Self> {
        let rig = Self { cameras };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::Calibration("camera rig is empty".into()));
        }
        let mut names = HashSet::new();
        for cam in &self.cameras {
            cam.validate()?;
            if !names.insert(cam.name.as_str()) {
                return Err(Error::Calibration(format!("duplicate camera name {}", cam.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Common image size `(H, W)`, or an error if cameras disagree.
    pub fn image_size(&self) -> Result<(usize, usize)> {
        let (h, w) = (self.cameras[0].height, self.cameras[0].width);
        if self.cameras.iter().any(|c| c.height != h || c.width != w) {
            return Err(Error::Calibration("cameras must share one image size".into()));
        }
        Ok((h, w))
    }

    /// Six-camera surround rig mounted 1.6 m above ground, 75° horizontal
    /// field of view each, pitched 8° down.
    pub fn surround(height: usize, width: usize) -> Result<Self> {
        let deg = std::f64::consts::PI / 180.0;
        let mount = 1.6;
        let specs = [
            ("CAM_FRONT", 0.0, 0.0, 0.0),
            ("CAM_FRONT_LEFT", -0.5, 0.8, 55.0),
            ("CAM_FRONT_RIGHT", -0.5, -0.8, -55.0),
            ("CAM_BACK_LEFT", -2.0, 0.8, 115.0),
            ("CAM_BACK_RIGHT", -2.0, -0.8, -115.0),
            ("CAM_BACK", -3.0, 0.0, 180.0),
        ];
        let cameras = specs
            .iter()
            .map(|&(name, x, y, yaw)| {
                CameraModel::looking(
                    name,
                    Point3::new(x, y, mount),
                    yaw * deg,
                    8.0 * deg,
                    75.0 * deg,
                    height,
                    width,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cameras)
    }

    pub fn to_json(&self) -> Result<String> {
        let records: Vec<CameraRecord> = self.cameras.iter().map(CameraRecord::from).collect();
        Ok(serde_json::to_string_pretty(&records)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let records: Vec<CameraRecord> = serde_json::from_str(text)?;
        let cameras = records
            .into_iter()
            .map(CameraModel::try_from)
            .collect::<Result<Vec<_>>>()?;
        Self::new(cameras)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn transformed(&self, rot: &Matrix3<f64>, trans: &Vector3<f64>) -> Self {
        Self {
            cameras: self.cameras.iter().map(|c| c.transformed(rot, trans)).collect(),
        }
    }
}

/// Calibration file entry: row-major `K` and `R`, translation `t`, image size.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraRecord {
    pub name: String,
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}

impl From<&CameraModel> for CameraRecord {
    fn from(c: &CameraModel) -> Self {
        Self {
            name: c.name.clone(),
            k: row_major(&c.intrinsics),
            r: row_major(&c.rotation),
            t: [c.translation.x, c.translation.y, c.translation.z],
            h: c.height,
            w: c.width,
        }
    }
}

impl TryFrom<CameraRecord> for CameraModel {
    type Error = Error;

    fn try_from(r: CameraRecord) -> Result<Self> {
        CameraModel::new(
            r.name,
            Matrix3::from_row_slice(&r.k),
            Matrix3::from_row_slice(&r.r),
            Vector3::from_row_slice(&r.t),
            r.h,
            r.w,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use proptest::prelude::*;

    fn identity_cam(fx: f64, cx: f64, cy: f64, w: usize, h: usize) -> CameraModel {
        CameraModel::new(
            "cam",
            Matrix3::new(fx, 0.0, cx, 0.0, fx, cy, 0.0, 0.0, 1.0),
            Matrix3::identity(),
            Vector3::zeros(),
            h,
            w,
        )
        .unwrap()
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let cam = identity_cam(100.0, 50.0, 40.0, 100, 80);
        let p = cam.project(&Point3::new(0.0, 0.0, 7.0));
        assert_eq!((p.u, p.v, p.depth, p.valid), (50.0, 40.0, 7.0, true));
    }

    #[test]
    fn behind_camera_is_invalid() {
        let cam = identity_cam(100.0, 50.0, 40.0, 100, 80);
        assert!(!cam.project(&Point3::new(0.0, 0.0, -1.0)).valid);
        assert!(!cam.project(&Point3::new(0.0, 0.0, 1e-4)).valid);
    }

    #[test]
    fn hand_pinhole_value() {
        let cam = identity_cam(100.0, 50.0, 40.0, 200, 80);
        let p = cam.project(&Point3::new(1.0, 0.0, 2.0));
        assert_eq!(p.u, 100.0);
        assert!(p.valid);
    }

    #[test]
    fn outside_image_is_invalid() {
        let cam = identity_cam(100.0, 50.0, 40.0, 100, 80);
        assert!(!cam.project(&Point3::new(1.0, 0.0, 2.0)).valid); // u = 100 == W
    }

    #[test]
    fn rejects_bad_calibration() {
        let k = Matrix3::new(100.0, 0.0, 50.0, 0.0, 100.0, 40.0, 0.0, 0.0, 1.0);
        let reflect = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraModel::new("a", k, reflect, Vector3::zeros(), 80, 100).is_err());
        let k_bad = Matrix3::new(100.0, 0.0, 150.0, 0.0, 100.0, 40.0, 0.0, 0.0, 1.0);
        assert!(CameraModel::new("a", k_bad, Matrix3::identity(), Vector3::zeros(), 80, 100).is_err());
        let cam = identity_cam(100.0, 50.0, 40.0, 100, 80);
        assert!(CameraRig::new(vec![cam.clone(), cam]).is_err());
    }

    #[test]
    fn looking_camera_sees_forward_point() {
        let cam = CameraModel::looking("f", Point3::new(0.0, 0.0, 1.5), 0.0, 0.0, 1.2, 64, 128).unwrap();
        let p = cam.project(&Point3::new(10.0, 0.0, 1.5));
        assert!(p.valid);
        assert!((p.u - 64.0).abs() < 1e-9 && (p.v - 32.0).abs() < 1e-9);
        // A point to the left lands on the left half of the image.
        assert!(cam.project(&Point3::new(10.0, 2.0, 1.5)).u < 64.0);
        // A point above lands on the upper half.
        assert!(cam.project(&Point3::new(10.0, 0.0, 3.0)).v < 32.0);
    }

    #[test]
    fn calibration_json_round_trip() {
        let rig = CameraRig::surround(64, 128).unwrap();
        let back = CameraRig::from_json(&rig.to_json().unwrap()).unwrap();
        assert_eq!(rig, back);
    }

    proptest! {
        #[test]
        fn unproject_inverts_project(x in -20.0f64..20.0, y in -20.0f64..20.0, z in 0.0f64..5.0, cam_idx in 0usize..6) {
            let rig = CameraRig::surround(448, 896).unwrap();
            let cam = &rig.cameras[cam_idx];
            let p = Point3::new(x, y, z);
            let proj = cam.project(&p);
            prop_assume!(proj.depth > DEPTH_EPSILON);
            let back = cam.unproject(proj.u, proj.v, proj.depth);
            prop_assert!((back - p).norm() <= 1e-6);
        }

        #[test]
        fn rigid_motion_preserves_projection(
            roll in -3.0f64..3.0, pitch in -1.5f64..1.5, yaw in -3.0f64..3.0,
            tx in -5.0f64..5.0, ty in -5.0f64..5.0, tz in -5.0f64..5.0,
            x in -20.0f64..20.0, y in -20.0f64..20.0, z in 0.0f64..5.0,
        ) {
            let rig = CameraRig::surround(64, 128).unwrap();
            let rot = *Rotation3::from_euler_angles(roll, pitch, yaw).matrix();
            let trans = Vector3::new(tx, ty, tz);
            let moved = rig.transformed(&rot, &trans);
            let p = Point3::new(x, y, z);
            let q = Point3::from(rot * p.coords + trans);
            for (a, b) in rig.cameras.iter().zip(&moved.cameras) {
                let pa = a.project(&p);
                let pb = b.project(&q);
                prop_assert!((pa.u - pb.u).abs() < 1e-6 * pa.u.abs().max(1.0));
                prop_assert!((pa.v - pb.v).abs() < 1e-6 * pa.v.abs().max(1.0));
                prop_assert!((pa.depth - pb.depth).abs() < 1e-9);
            }
        }
    }
}
