//! Random road scenes: an axis-aligned road layout with map-class
//! polygons, vehicles placed on the lanes, and a surround camera rig.

use std::fmt;
use std::str::FromStr;

use bevcar_core::geometry::{BevGrid, CameraRig};
use bevcar_core::head::MAP_CLASSES;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Day,
    Rain,
    Night,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Day, Condition::Rain, Condition::Night];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Day => "day",
            Condition::Rain => "rain",
            Condition::Night => "night",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "day" => Ok(Condition::Day),
            "rain" => Ok(Condition::Rain),
            "night" => Ok(Condition::Night),
            other => Err(DataError::Generation(format!("unknown condition {other:?}"))),
        }
    }
}

/// Simple polygon in the ground plane, vertices in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub vertices: Vec<[f64; 2]>,
}

impl Polygon {
    pub fn rect(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        let (x0, x1) = (x0.min(x1), x0.max(x1));
        let (y0, y1) = (y0.min(y1), y0.max(y1));
        Self {
            vertices: vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]],
        }
    }

    /// Even-odd ray casting.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let v = &self.vertices;
        let mut inside = false;
        let mut j = v.len() - 1;
        for i in 0..v.len() {
            let ([xi, yi], [xj, yj]) = (v[i], v[j]);
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    /// No two non-adjacent edges intersect.
    pub fn is_simple(&self) -> bool {
        let v = &self.vertices;
        let n = v.len();
        if n < 3 {
            return false;
        }
        let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
        let intersects = |p1, p2, q1, q2| {
            let d1 = cross(q1, q2, p1);
            let d2 = cross(q1, q2, p2);
            let d3 = cross(p1, p2, q1);
            let d4 = cross(p1, p2, q2);
            d1 * d2 < 0.0 && d3 * d4 < 0.0
        };
        for i in 0..n {
            for j in i + 1..n {
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                if intersects(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]) {
                    return false;
                }
            }
        }
        true
    }
}

/// Oriented vehicle box resting on the ground.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleBox {
    pub center: [f64; 2],
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub yaw: f64,
    pub velocity: [f64; 2],
}

impl VehicleBox {
    /// Point in box-local coordinates (x along the length).
    pub fn to_local(&self, x: f64, y: f64) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let [lx, ly] = self.to_local(x, y);
        lx.abs() <= self.length / 2.0 && ly.abs() <= self.width / 2.0
    }

    /// Ground-plane corners, counter-clockwise.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]].map(|[a, b]| [self.center[0] + c * a - s * b, self.center[1] + s * a + c * b])
    }

    pub fn half_diagonal(&self) -> f64 {
        0.5 * self.length.hypot(self.width)
    }

    /// Separating-axis test on the ground-plane rectangles.
    pub fn overlaps(&self, other: &VehicleBox) -> bool {
        let (a, b) = (self.corners(), other.corners());
        let axes = [self.yaw, self.yaw + std::f64::consts::FRAC_PI_2, other.yaw, other.yaw + std::f64::consts::FRAC_PI_2];
        for t in axes {
            let (s, c) = t.sin_cos();
            let proj = |pts: &[[f64; 2]; 4]| {
                pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    let d = p[0] * c + p[1] * s;
                    (lo.min(d), hi.max(d))
                })
            };
            let (a0, a1) = proj(&a);
            let (b0, b1) = proj(&b);
            if a1 < b0 || b1 < a0 {
                return false;
            }
        }
        true
    }
}

/// Generation knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub grid: BevGrid,
    pub image_height: usize,
    pub image_width: usize,
    pub min_vehicles: usize,
    pub max_vehicles: usize,
    /// Share of vehicles generated without motion.
    pub stationary_fraction: f64,
    /// Placement attempts per vehicle before giving up.
    pub max_attempts: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            grid: BevGrid::default(),
            image_height: 448,
            image_width: 896,
            min_vehicles: 3,
            max_vehicles: 12,
            stationary_fraction: 0.3,
            max_attempts: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub condition: Condition,
    pub vehicles: Vec<VehicleBox>,
    /// Polygons per map class, in [`MAP_CLASSES`] order.
    pub map: Vec<Vec<Polygon>>,
    pub rig: CameraRig,
    /// Ground extent covered by the layout (half sizes in x and y).
    pub half_extent: [f64; 2],
}

/// Road along one axis. `along_x` roads run forward; others run sideways.
struct Road {
    along_x: bool,
    offset: f64,
    width: f64,
}

fn class_index(name: &str) -> usize {
    MAP_CLASSES.iter().position(|c| *c == name).expect("known class")
}

/// Deterministic scene for `seed`.
pub fn generate_scene(seed: u64, condition: Condition, params: &SceneParams) -> Result<SyntheticScene> {
    params.grid.validate()?;
    if params.min_vehicles > params.max_vehicles {
        return Err(DataError::Generation("min_vehicles exceeds max_vehicles".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hx = params.grid.x_extent / 2.0;
    let hy = params.grid.y_extent / 2.0;
    let mut map = vec![Vec::new(); MAP_CLASSES.len()];

    let main = Road {
        along_x: true,
        offset: rng.random_range(-1.0..1.0),
        width: rng.random_range(8.0..12.0),
    };
    let mut roads = vec![main];
    if rng.random_bool(0.6) {
        roads.push(Road {
            along_x: false,
            offset: rng.random_range(-0.6..0.6) * hx,
            width: rng.random_range(7.0..10.0),
        });
    }
    let walk = 2.5;
    for road in &roads {
        let (lo, hi) = (road.offset - road.width / 2.0, road.offset + road.width / 2.0);
        let span = |a: f64, b: f64| if road.along_x { Polygon::rect(-hx, hx, a, b) } else { Polygon::rect(a, b, -hy, hy) };
        map[class_index("drivable_area")].push(span(lo, hi));
        map[class_index("walkway")].push(span(hi, hi + walk));
        map[class_index("walkway")].push(span(lo - walk, lo));
        map[class_index("road_divider")].push(span(road.offset - 0.3, road.offset + 0.3));
        for side in [-1.0, 1.0] {
            let y = road.offset + side * road.width / 4.0;
            map[class_index("lane_divider")].push(span(y - 0.3, y + 0.3));
        }
    }
    let main = &roads[0];
    if let Some(cross) = roads.get(1) {
        // crossings and a stop line on the main road next to the junction
        let edge = cross.offset - cross.width / 2.0;
        let (lo, hi) = (main.offset - main.width / 2.0, main.offset + main.width / 2.0);
        map[class_index("ped_crossing")].push(Polygon::rect(edge - 4.0, edge - 1.0, lo, hi));
        map[class_index("stop_line")].push(Polygon::rect(edge - 5.0, edge - 4.4, lo, main.offset));
        let far = cross.offset + cross.width / 2.0;
        map[class_index("ped_crossing")].push(Polygon::rect(far + 1.0, far + 4.0, lo, hi));
    } else {
        let x = rng.random_range(-0.5..0.5) * hx;
        let (lo, hi) = (main.offset - main.width / 2.0, main.offset + main.width / 2.0);
        map[class_index("ped_crossing")].push(Polygon::rect(x, x + 3.0, lo, hi));
        map[class_index("stop_line")].push(Polygon::rect(x - 1.6, x - 1.0, lo, main.offset));
    }
    if rng.random_bool(0.5) {
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let near = main.offset + side * (main.width / 2.0 + walk + 1.0);
        let depth = rng.random_range(8.0..15.0);
        let x0 = rng.random_range(-0.8..0.3) * hx;
        let len = rng.random_range(10.0..20.0);
        map[class_index("carpark_area")].push(Polygon::rect(x0, x0 + len, near, near + side * depth));
    }

    let count = rng.random_range(params.min_vehicles..=params.max_vehicles);
    let mut vehicles: Vec<VehicleBox> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..params.max_attempts {
            let road = &roads[rng.random_range(0..roads.len())];
            let lane = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let across = road.offset + lane * road.width / 4.0 + rng.random_range(-0.4..0.4);
            let (length, width) = (rng.random_range(3.8..5.2), rng.random_range(1.7..2.1));
            let height = rng.random_range(1.4..1.9);
            let jitter = rng.random_range(-0.15..0.15);
            let heading = if lane > 0.0 { std::f64::consts::PI } else { 0.0 };
            let (center, yaw) = if road.along_x {
                ([rng.random_range(-hx..hx), across], heading + jitter)
            } else {
                ([across, rng.random_range(-hy..hy)], heading + std::f64::consts::FRAC_PI_2 + jitter)
            };
            let speed = if rng.random_bool(params.stationary_fraction.clamp(0.0, 1.0)) {
                0.0
            } else {
                rng.random_range(2.0..14.0)
            };
            let v = VehicleBox {
                center,
                length,
                width,
                height,
                yaw,
                velocity: [speed * yaw.cos(), speed * yaw.sin()],
            };
            let inside = v.corners().iter().all(|c| c[0].abs() < hx && c[1].abs() < hy);
            // keep the ego footprint around the origin free
            let ego = VehicleBox {
                center: [0.0, 0.0],
                length: 6.0,
                width: 3.0,
                height: 1.5,
                yaw: 0.0,
                velocity: [0.0, 0.0],
            };
            if inside && !v.overlaps(&ego) && vehicles.iter().all(|o| !o.overlaps(&v)) {
                vehicles.push(v);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(DataError::Generation(format!(
                "could not place vehicle {} of {count} after {} attempts",
                vehicles.len() + 1,
                params.max_attempts
            )));
        }
    }
    Ok(SyntheticScene {
        seed,
        condition,
        vehicles,
        map,
        rig: CameraRig::surround(params.image_height, params.image_width)?,
        half_extent: [hx, hy],
    })
}
