//! Turns a scene into a sample: flat-shaded camera images, a radar point
//! cloud sampled on vehicle faces, and rasterized BEV ground truth.

use bevcar_core::geometry::{BevGrid, CameraModel};
use bevcar_core::head::MAP_CLASSES;
use bevcar_core::loss::BevGroundTruth;
use bevcar_core::radar::{RadarPointCloud, RADAR_ATTRIBUTES};
use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scene::{Condition, SyntheticScene, VehicleBox};

/// Radar position noise standard deviation, meters.
pub const RADAR_SIGMA: f64 = 0.3;
/// Radar returns per vehicle.
pub const RADAR_POINTS_PER_VEHICLE: (usize, usize) = (5, 30);
/// Radar mounting point in the reference frame.
pub const RADAR_ORIGIN: [f64; 3] = [0.0, 0.0, 0.5];
const VELOCITY_SIGMA: f64 = 0.1;

/// 8-bit RGB image, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub token: String,
    pub seed: u64,
    pub condition: Condition,
    /// One image per rig camera, in rig order.
    pub images: Vec<RgbImage>,
    pub radar: RadarPointCloud,
    pub calibration: bevcar_core::geometry::CameraRig,
    pub gt: BevGroundTruth,
}

/// Radar returns with the vehicle each one came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RadarReturns {
    pub points: Vec<[f64; RADAR_ATTRIBUTES]>,
    pub vehicle: Vec<usize>,
}

fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(purpose);
    r
}

/// Gaussian offset with isotropic `sigma`, redrawn until its norm is at most
/// `3 * sigma`.
fn truncated_noise(rng: &mut ChaCha8Rng, sigma: f64) -> [f64; 3] {
    let n = Normal::new(0.0, sigma).expect("positive sigma");
    loop {
        let v = [n.sample(rng), n.sample(rng), n.sample(rng)];
        if (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() <= 3.0 * sigma {
            return v;
        }
    }
}

/// Radar points on the vehicle faces that look towards the radar. The
/// stream depends only on the scene seed, so returns do not change with
/// the lighting condition.
pub fn radar_returns(scene: &SyntheticScene) -> RadarReturns {
    let mut rng = stream(scene.seed, 1);
    let vel = Normal::new(0.0, VELOCITY_SIGMA).expect("positive sigma");
    let mut out = RadarReturns::default();
    for (vi, v) in scene.vehicles.iter().enumerate() {
        let n = rng.random_range(RADAR_POINTS_PER_VEHICLE.0..=RADAR_POINTS_PER_VEHICLE.1);
        let rcs = rng.random_range(5.0..20.0);
        let c = v.corners();
        // faces as (start, end, outward normal); corners are counter-clockwise
        let faces: Vec<([f64; 2], [f64; 2])> = (0..4)
            .map(|i| (c[i], c[(i + 1) % 4]))
            .filter(|(a, b)| {
                let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
                let normal = [ey, -ex];
                let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
                normal[0] * (RADAR_ORIGIN[0] - mid[0]) + normal[1] * (RADAR_ORIGIN[1] - mid[1]) > 0.0
            })
            .collect();
        let lengths: Vec<f64> = faces.iter().map(|(a, b)| (b[0] - a[0]).hypot(b[1] - a[1])).collect();
        let total: f64 = lengths.iter().sum();
        for _ in 0..n {
            let mut pick = rng.random_range(0.0..total);
            let mut fi = 0;
            while fi + 1 < faces.len() && pick >= lengths[fi] {
                pick -= lengths[fi];
                fi += 1;
            }
            let (a, b) = faces[fi];
            let t = rng.random_range(0.0..1.0);
            let z = rng.random_range(0.3..v.height.min(1.5));
            let noise = truncated_noise(&mut rng, RADAR_SIGMA);
            out.points.push([
                a[0] + t * (b[0] - a[0]) + noise[0],
                a[1] + t * (b[1] - a[1]) + noise[1],
                z + noise[2],
                v.velocity[0] + vel.sample(&mut rng),
                v.velocity[1] + vel.sample(&mut rng),
                rcs,
            ]);
            out.vehicle.push(vi);
        }
    }
    out
}

/// Cell-center rasterization of vehicles and map polygons.
pub fn rasterize_gt(scene: &SyntheticScene, grid: &BevGrid) -> BevGroundTruth {
    let mut gt = BevGroundTruth::empty(grid.x_cells, grid.y_cells);
    for i in 0..grid.x_cells {
        for j in 0..grid.y_cells {
            let (x, y) = grid.cell_center_xy(i, j);
            let c = i * grid.y_cells + j;
            gt.vehicle[c] = scene.vehicles.iter().any(|v| v.contains(x, y));
            for (m, polys) in scene.map.iter().enumerate() {
                gt.maps[m][c] = polys.iter().any(|p| p.contains(x, y));
            }
        }
    }
    gt
}

/// Cells of the GT mask covered by one vehicle.
pub fn vehicle_cells(v: &VehicleBox, grid: &BevGrid) -> Vec<(usize, usize)> {
    let mut cells = Vec::new();
    for i in 0..grid.x_cells {
        for j in 0..grid.y_cells {
            let (x, y) = grid.cell_center_xy(i, j);
            if v.contains(x, y) {
                cells.push((i, j));
            }
        }
    }
    cells
}

const SKY: [f64; 3] = [0.55, 0.7, 0.9];
const GROUND: [f64; 3] = [0.35, 0.45, 0.3];

fn class_color(name: &str) -> [f64; 3] {
    match name {
        "drivable_area" => [0.3, 0.3, 0.32],
        "carpark_area" => [0.35, 0.38, 0.55],
        "ped_crossing" => [0.92, 0.92, 0.92],
        "walkway" => [0.62, 0.6, 0.55],
        "stop_line" => [0.97, 0.97, 0.97],
        "road_divider" => [0.9, 0.75, 0.1],
        "lane_divider" => [0.85, 0.85, 0.8],
        _ => GROUND,
    }
}

/// Paint order: later classes cover earlier ones.
const PAINT_ORDER: [&str; 7] = [
    "carpark_area",
    "walkway",
    "drivable_area",
    "ped_crossing",
    "stop_line",
    "lane_divider",
    "road_divider",
];

fn ground_color(scene: &SyntheticScene, x: f64, y: f64) -> [f64; 3] {
    let mut color = GROUND;
    if x.abs() > scene.half_extent[0] || y.abs() > scene.half_extent[1] {
        return color;
    }
    for name in PAINT_ORDER {
        let m = MAP_CLASSES.iter().position(|c| *c == name).expect("known class");
        if scene.map[m].iter().any(|p| p.contains(x, y)) {
            color = class_color(name);
        }
    }
    color
}

fn vehicle_color(index: usize, seed: u64) -> [f64; 3] {
    let mut rng = stream(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15), 3);
    let h: f64 = rng.random_range(0.0..6.0);
    let (r, g, b) = match h as usize {
        0 => (1.0, h.fract(), 0.0),
        1 => (1.0 - h.fract(), 1.0, 0.0),
        2 => (0.0, 1.0, h.fract()),
        3 => (0.0, 1.0 - h.fract(), 1.0),
        4 => (h.fract(), 0.0, 1.0),
        _ => (1.0, 0.0, 1.0 - h.fract()),
    };
    [0.2 + 0.7 * r, 0.2 + 0.7 * g, 0.2 + 0.7 * b]
}

/// Nearest ray hit with an upright oriented box: distance and unit normal.
fn hit_box(v: &VehicleBox, o: &Point3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let (s, c) = v.yaw.sin_cos();
    let to_local = |x: f64, y: f64| (c * x + s * y, -s * x + c * y);
    let (ox, oy) = to_local(o.x - v.center[0], o.y - v.center[1]);
    let (dx, dy) = to_local(d.x, d.y);
    let lo = [-v.length / 2.0, -v.width / 2.0, 0.0];
    let hi = [v.length / 2.0, v.width / 2.0, v.height];
    let (orig, dir) = ([ox, oy, o.z], [dx, dy, d.z]);
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    let mut axis = 0;
    let mut sign = 1.0;
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            if orig[a] < lo[a] || orig[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[a] - orig[a]) / dir[a], (hi[a] - orig[a]) / dir[a]);
        let mut sa = -1.0;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
            sa = 1.0;
        }
        if ta > t0 {
            t0 = ta;
            axis = a;
            sign = sa;
        }
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    if t0 <= 0.0 {
        return None;
    }
    let mut nl = [0.0; 3];
    nl[axis] = sign;
    let normal = Vector3::new(c * nl[0] - s * nl[1], s * nl[0] + c * nl[1], nl[2]);
    Some((t0, normal))
}

/// Flat-shaded view of the scene from one camera, before condition effects.
pub fn render_clean(scene: &SyntheticScene, cam: &CameraModel) -> Vec<[f64; 3]> {
    let origin = cam.center();
    let light = Vector3::new(0.3, 0.5, 0.8).normalize();
    let mut px = Vec::with_capacity(cam.height * cam.width);
    for row in 0..cam.height {
        for col in 0..cam.width {
            let d = cam.ray_direction(col as f64, row as f64);
            let mut best: Option<(f64, [f64; 3])> = None;
            for (vi, v) in scene.vehicles.iter().enumerate() {
                if let Some((t, n)) = hit_box(v, &origin, &d) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        let shade = 0.55 + 0.45 * n.dot(&light).abs();
                        let base = vehicle_color(vi, scene.seed);
                        best = Some((t, base.map(|b| b * shade)));
                    }
                }
            }
            if d.z < 0.0 {
                let t = -origin.z / d.z;
                if best.is_none_or(|(bt, _)| t < bt) {
                    let p = origin + d * t;
                    best = Some((t, ground_color(scene, p.x, p.y)));
                }
            }
            px.push(best.map_or(SKY, |(_, c)| c));
        }
    }
    px
}

/// Lighting and weather: rain darkens and adds noise, night scales the
/// image close to black and adds sensor noise.
pub fn apply_condition(pixels: &mut [[f64; 3]], condition: Condition, rng: &mut ChaCha8Rng) {
    let (gain, sigma) = match condition {
        Condition::Day => (1.0, 0.01),
        Condition::Rain => (0.7, 0.06),
        Condition::Night => (0.04, 0.02),
    };
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    for p in pixels.iter_mut() {
        for ch in p.iter_mut() {
            *ch = *ch * gain + noise.sample(rng);
        }
    }
}

fn quantize(pixels: &[[f64; 3]], cam: &CameraModel) -> RgbImage {
    let data = pixels
        .iter()
        .flat_map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    RgbImage {
        height: cam.height,
        width: cam.width,
        data,
    }
}

/// Renders every camera, the radar cloud and the ground truth.
pub fn render_sample(scene: &SyntheticScene, grid: &BevGrid, token: &str) -> Result<Sample> {
    let mut images = Vec::with_capacity(scene.rig.len());
    for (ci, cam) in scene.rig.cameras.iter().enumerate() {
        let mut px = render_clean(scene, cam);
        let mut rng = stream(scene.seed, 16 + ci as u64);
        apply_condition(&mut px, scene.condition, &mut rng);
        images.push(quantize(&px, cam));
    }
    let returns = radar_returns(scene);
    Ok(Sample {
        token: token.to_string(),
        seed: scene.seed,
        condition: scene.condition,
        images,
        radar: RadarPointCloud::new(returns.points, 5)?,
        calibration: scene.rig.clone(),
        gt: rasterize_gt(scene, grid),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, Polygon, SceneParams};
    use bevcar_core::geometry::CameraRig;

    fn grid() -> BevGrid {
        BevGrid::new((100, 100, 4), (50.0, 50.0), (0.0, 5.0)).unwrap()
    }

    fn bare_scene(vehicles: Vec<VehicleBox>, rig: CameraRig) -> SyntheticScene {
        SyntheticScene {
            seed: 11,
            condition: Condition::Day,
            vehicles,
            map: vec![Vec::new(); MAP_CLASSES.len()],
            rig,
            half_extent: [25.0, 25.0],
        }
    }

    fn car(x: f64, y: f64, speed: f64) -> VehicleBox {
        VehicleBox {
            center: [x, y],
            length: 4.0,
            width: 2.0,
            height: 1.6,
            yaw: 0.0,
            velocity: [speed, 0.0],
        }
    }

    #[test]
    fn axis_aligned_box_rasterizes_to_8_by_4() {
        let s = bare_scene(vec![car(0.0, 0.0, 0.0)], CameraRig::surround(64, 128).unwrap());
        let gt = rasterize_gt(&s, &grid());
        assert_eq!(gt.vehicle.iter().filter(|&&v| v).count(), 32);
        let rows: std::collections::BTreeSet<usize> = (0..10000).filter(|&c| gt.vehicle[c]).map(|c| c / 100).collect();
        assert_eq!(rows.len(), 8);
    }

    #[test]
    fn hidden_vehicle_still_has_radar_and_gt() {
        let front = CameraModel::looking("front", Point3::new(0.0, 0.0, 1.6), 0.0, 0.0, 60f64.to_radians(), 64, 128).unwrap();
        let rig = CameraRig::new(vec![front]).unwrap();
        let s = bare_scene(vec![car(-12.0, 3.0, 5.0)], rig);
        let sample = render_sample(&s, &grid(), "t").unwrap();
        assert!(!sample.radar.is_empty());
        assert!(sample.gt.vehicle.iter().any(|&v| v));
        let clean = bare_scene(vec![], s.rig.clone());
        assert_eq!(render_clean(&s, &s.rig.cameras[0]), render_clean(&clean, &clean.rig.cameras[0]));
    }

    #[test]
    fn stationary_vehicle_velocity_is_noise() {
        let s = bare_scene(vec![car(10.0, 5.0, 0.0)], CameraRig::surround(64, 128).unwrap());
        let r = radar_returns(&s);
        assert!(!r.points.is_empty());
        for p in &r.points {
            assert!(p[3].abs() < 5.0 * VELOCITY_SIGMA && p[4].abs() < 5.0 * VELOCITY_SIGMA);
        }
        let mean: f64 = r.points.iter().map(|p| p[3]).sum::<f64>() / r.points.len() as f64;
        assert!(mean.abs() < 0.1);
    }

    #[test]
    fn radar_points_near_their_vehicle() {
        let p = SceneParams {
            grid: grid(),
            image_height: 64,
            image_width: 128,
            ..Default::default()
        };
        let g = grid();
        for seed in 0..10 {
            let s = generate_scene(seed, Condition::Day, &p).unwrap();
            let r = radar_returns(&s);
            let counts = (0..s.vehicles.len()).map(|v| r.vehicle.iter().filter(|&&x| x == v).count());
            assert!(counts.clone().all(|n| (5..=30).contains(&n)));
            for (pt, &vi) in r.points.iter().zip(&r.vehicle) {
                let v = &s.vehicles[vi];
                let cells = vehicle_cells(v, &g);
                assert!(!cells.is_empty());
                let (mut cx, mut cy) = (0.0, 0.0);
                for &(i, j) in &cells {
                    let (x, y) = g.cell_center_xy(i, j);
                    cx += x;
                    cy += y;
                }
                cx /= cells.len() as f64;
                cy /= cells.len() as f64;
                let bound = 3.0 * RADAR_SIGMA + v.half_diagonal() + 0.5 * 0.5f64.hypot(0.5);
                assert!((pt[0] - cx).hypot(pt[1] - cy) <= bound);
            }
        }
    }

    #[test]
    fn radar_ignores_condition_and_night_is_dark() {
        let p = SceneParams {
            grid: grid(),
            image_height: 32,
            image_width: 64,
            ..Default::default()
        };
        let day = generate_scene(4, Condition::Day, &p).unwrap();
        let night = SyntheticScene {
            condition: Condition::Night,
            ..day.clone()
        };
        assert_eq!(radar_returns(&day), radar_returns(&night));
        let d = render_sample(&day, &grid(), "d").unwrap();
        let n = render_sample(&night, &grid(), "n").unwrap();
        let mean = |s: &Sample| s.images.iter().flat_map(|i| i.data.iter()).map(|&b| b as f64).sum::<f64>() / s.images.iter().map(|i| i.data.len()).sum::<usize>() as f64;
        assert!(mean(&n) < 0.1 * mean(&d));
        assert_eq!(d.gt, n.gt);
    }

    #[test]
    fn camera_sees_vehicle_ahead() {
        let front = CameraModel::looking("front", Point3::new(0.0, 0.0, 1.6), 0.0, 0.0, 60f64.to_radians(), 64, 128).unwrap();
        let rig = CameraRig::new(vec![front.clone()]).unwrap();
        let s = bare_scene(vec![car(10.0, 0.0, 0.0)], rig);
        let px = render_clean(&s, &front);
        let p = front.project(&Point3::new(8.0, 0.0, 0.8));
        let center = px[p.v.round() as usize * 128 + p.u.round() as usize];
        assert_eq!(center.map(|c| (c * 1e6).round()), {
            let base = vehicle_color(0, 11);
            let shade = 0.55 + 0.45 * Vector3::<f64>::new(-1.0, 0.0, 0.0).dot(&Vector3::new(0.3, 0.5, 0.8).normalize()).abs();
            base.map(|b| (b * shade * 1e6).round())
        });
        let _ = Polygon::rect(0.0, 1.0, 0.0, 1.0);
    }
}
