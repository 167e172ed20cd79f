//! Synthetic LiDAR scenes: a multi-beam sensor ray-cast against a ground
//! plane and axis-aligned boxes.
#![allow(dead_code)]

use std::path::Path;

use levk::io::{write_label_frame, write_point_frame, LabelFrame, Manifest, ManifestEntry, Point, PointFrame};

pub const SENSOR_HEIGHT: f64 = 1.73;
pub const ROAD_HALF_WIDTH: f64 = 6.0;

/// SemanticKITTI raw ids used by the scenes.
pub mod kitti {
    pub const CAR: u16 = 10;
    pub const ROAD: u16 = 40;
    pub const BUILDING: u16 = 50;
    pub const TERRAIN: u16 = 72;
    pub const PERSON: u16 = 30;
}

/// SemanticPOSS raw ids used by the auxiliary frames.
pub mod poss {
    pub const PERSON: u16 = 4;
    pub const ROAD: u16 = 22;
}

#[derive(Clone, Copy, Debug)]
pub struct Box3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub label: u16,
    pub instance: u16,
}

impl Box3 {
    pub fn new(min: [f64; 3], max: [f64; 3], label: u16, instance: u16) -> Self {
        Self { min, max, label, instance }
    }

    /// Slab test; entry distance along unit `d` from the origin.
    fn hit(&self, d: [f64; 3]) -> Option<f64> {
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        for k in 0..3 {
            if d[k].abs() < 1e-12 {
                if 0.0 < self.min[k] || 0.0 > self.max[k] {
                    return None;
                }
                continue;
            }
            let (a, b) = (self.min[k] / d[k], self.max[k] / d[k]);
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
        (lo <= hi && lo > 0.0).then_some(lo)
    }
}

#[derive(Clone, Debug)]
pub struct Sensor {
    pub beams: usize,
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
    pub azimuth_step_deg: f64,
    pub max_range: f64,
}

impl Sensor {
    pub fn hdl64() -> Self {
        Self { beams: 64, min_elevation_deg: -24.8, max_elevation_deg: 2.0, azimuth_step_deg: 0.25, max_range: 40.0 }
    }
}

/// Scene ground: road inside `|y| < ROAD_HALF_WIDTH`, `off_road` outside.
#[derive(Clone, Debug)]
pub struct Scene {
    pub boxes: Vec<Box3>,
    pub road: u16,
    pub off_road: u16,
}

impl Scene {
    pub fn kitti(boxes: Vec<Box3>) -> Self {
        Self { boxes, road: kitti::ROAD, off_road: kitti::TERRAIN }
    }

    pub fn scan(&self, id: &str, sensor: &Sensor) -> (PointFrame, LabelFrame) {
        let mut points = Vec::new();
        let (mut labels, mut ids) = (Vec::new(), Vec::new());
        let az_steps = (360.0 / sensor.azimuth_step_deg).round() as usize;
        for b in 0..sensor.beams {
            let t = b as f64 / (sensor.beams - 1) as f64;
            let el = (sensor.min_elevation_deg + t * (sensor.max_elevation_deg - sensor.min_elevation_deg)).to_radians();
            for a in 0..az_steps {
                let az = (a as f64 * sensor.azimuth_step_deg).to_radians();
                let d = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
                let mut best: Option<(f64, u16, u16)> = None;
                if d[2] < 0.0 {
                    let t = -SENSOR_HEIGHT / d[2];
                    let y = t * d[1];
                    best = Some((t, if y.abs() < ROAD_HALF_WIDTH { self.road } else { self.off_road }, 0));
                }
                for bx in &self.boxes {
                    if let Some(t) = bx.hit(d) {
                        if best.is_none_or(|(bt, _, _)| t < bt) {
                            best = Some((t, bx.label, bx.instance));
                        }
                    }
                }
                if let Some((t, label, inst)) = best.filter(|b| b.0 <= sensor.max_range) {
                    let intensity = 0.1 + 0.01 * (label % 50) as f32;
                    points.push(Point::new((t * d[0]) as f32, (t * d[1]) as f32, (t * d[2]) as f32, intensity));
                    labels.push(label);
                    ids.push(inst);
                }
            }
        }
        (PointFrame::new(id, points), LabelFrame::new(labels, ids))
    }
}

/// Target scenes: cars parked on the road and buildings beyond it. `k`
/// shifts the layout so frames differ.
pub fn target_scene(k: usize) -> Scene {
    let s = k as f64 * 3.0;
    Scene::kitti(vec![
        Box3::new([6.0 + s, -4.5, -SENSOR_HEIGHT], [10.5 + s, -2.7, -0.3], kitti::CAR, 1),
        Box3::new([-14.0 + s, 2.5, -SENSOR_HEIGHT], [-9.5 + s, 4.3, -0.3], kitti::CAR, 2),
        Box3::new([-30.0, 9.0, -SENSOR_HEIGHT], [30.0, 14.0, 8.0], kitti::BUILDING, 0),
        Box3::new([-30.0, -14.0, -SENSOR_HEIGHT], [30.0, -9.0, 8.0], kitti::BUILDING, 0),
    ])
}

/// A 200-point pedestrian: the sensor-facing half of a 0.25 m cylinder,
/// 1.7 m tall, standing on the ground at `(x, y)`.
pub fn pedestrian(x: f64, y: f64) -> Vec<Point> {
    let facing = y.atan2(x) + std::f64::consts::PI;
    let mut pts = Vec::with_capacity(200);
    for h in 0..20 {
        for a in 0..10 {
            let phi = facing - std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * (a as f64 + 0.5) / 10.0;
            let z = -SENSOR_HEIGHT + 0.05 + 1.65 * h as f64 / 19.0;
            pts.push(Point::new((x + 0.25 * phi.cos()) as f32, (y + 0.25 * phi.sin()) as f32, z as f32, 0.45));
        }
    }
    pts
}

/// Auxiliary frame in SemanticPOSS ids: a sparse road plus one pedestrian
/// with instance id `instance`.
pub fn aux_frame(id: &str, at: (f64, f64), instance: u16) -> (PointFrame, LabelFrame) {
    let mut points = pedestrian(at.0, at.1);
    let mut labels = vec![poss::PERSON; points.len()];
    let mut ids = vec![instance; points.len()];
    for i in 0..40 {
        for j in 0..10 {
            points.push(Point::new(2.0 + i as f32 * 0.5, -2.5 + j as f32 * 0.5, -SENSOR_HEIGHT as f32, 0.2));
            labels.push(poss::ROAD);
            ids.push(0);
        }
    }
    (PointFrame::new(id, points), LabelFrame::new(labels, ids))
}

/// Writes frames as `velodyne/<id>.bin` + `labels/<id>.label` with a manifest.
pub fn write_dataset(dir: &Path, frames: &[(PointFrame, LabelFrame)]) -> Manifest {
    let mut entries = Vec::new();
    for (f, l) in frames {
        let bin = dir.join("velodyne").join(format!("{}.bin", f.frame_id));
        let lab = dir.join("labels").join(format!("{}.label", f.frame_id));
        write_point_frame(f, &bin).unwrap();
        write_label_frame(l, &lab).unwrap();
        entries.push(ManifestEntry { frame_id: f.frame_id.clone(), points: Some(bin), labels: Some(lab), predictions: None });
    }
    let m = Manifest { entries };
    m.save(dir.join("manifest.csv")).unwrap();
    Manifest::load(dir.join("manifest.csv")).unwrap()
}

/// Angle between two directions in radians, stable for tiny angles.
pub fn angle(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot: f64 = (0..3).map(|k| a[k] * b[k]).sum();
    let cross = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let nc = cross.iter().map(|v| v * v).sum::<f64>().sqrt();
    nc.atan2(dot)
}

pub fn norm(a: [f64; 3]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}
