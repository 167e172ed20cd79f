use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::{AugmentConfig, AugmentError, Instance, PlacementPose};
use crate::io::PointFrame;
use crate::taxonomy::{ClassId, ClassTable, MergedLabel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    /// No labeled frame point under the footprint.
    NoGround,
    /// Too small a share of the ground under the footprint is road.
    NotRoad,
    /// A non-ground object intrudes into the instance's cylinder.
    Occupied,
}

impl RejectReason {
    pub const ALL: [RejectReason; 3] = [RejectReason::NoGround, RejectReason::NotRoad, RejectReason::Occupied];

    pub fn name(self) -> &'static str {
        match self {
            RejectReason::NoGround => "NoGround",
            RejectReason::NotRoad => "NotRoad",
            RejectReason::Occupied => "Occupied",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    Valid,
    Rejected(RejectReason),
}

impl Placement {
    pub fn is_valid(self) -> bool {
        self == Placement::Valid
    }
}

/// Class ids the placement rules refer to, resolved against one table.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacementRules {
    pub support: ClassId,
    pub free: Vec<ClassId>,
    pub road_support_fraction: f64,
    pub margin: f64,
    pub ground_band: f64,
}

impl PlacementRules {
    pub fn resolve(table: &ClassTable, config: &AugmentConfig) -> Result<Self, AugmentError> {
        let id = |n: &str| table.class_by_name(n).ok_or_else(|| AugmentError::UnknownClass(n.to_string()));
        Ok(Self {
            support: id(&config.support_class)?,
            free: config.free_classes.iter().map(|n| id(n)).collect::<Result<_, _>>()?,
            road_support_fraction: config.road_support_fraction,
            margin: config.margin,
            ground_band: config.ground_band,
        })
    }

    fn is_free(&self, label: MergedLabel) -> bool {
        label.is_none_or(|c| c == self.support || self.free.contains(&c))
    }
}

/// Vertical cylinder around a posed instance: xy disc inflated by the margin
/// and the instance's height range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Footprint {
    pub center: Vector2<f64>,
    pub radius: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Footprint {
    pub fn of(instance: &Instance, margin: f64) -> Self {
        let center = instance.center.xy();
        let reach = instance
            .points
            .iter()
            .map(|p| (Vector2::new(p.x as f64, p.y as f64) - center).norm())
            .fold(0.0, f64::max);
        Self { center, radius: reach + margin, z_min: instance.min_z(), z_max: instance.max_z() }
    }

    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        (Vector2::new(x, y) - self.center).norm_squared() <= self.radius * self.radius
    }
}

/// Indices of labeled points under the footprint within `band` of the lowest one.
fn ground_points(frame: &PointFrame, merged: &[MergedLabel], fp: &Footprint, band: f64) -> Vec<usize> {
    let under: Vec<usize> = (0..frame.len())
        .filter(|&i| merged[i].is_some())
        .filter(|&i| frame.points[i].x.is_finite() && fp.contains_xy(frame.points[i].x as f64, frame.points[i].y as f64))
        .collect();
    let floor = under.iter().map(|&i| frame.points[i].z as f64).fold(f64::INFINITY, f64::min);
    under.into_iter().filter(|&i| frame.points[i].z as f64 <= floor + band).collect()
}

/// Vertical shift that puts the instance's lowest point on the median road
/// height under its footprint. `instance` is already rotated, not yet shifted.
pub fn ground_shift(
    frame: &PointFrame,
    merged: &[MergedLabel],
    instance: &Instance,
    rules: &PlacementRules,
) -> Result<f64, RejectReason> {
    let fp = Footprint::of(instance, rules.margin);
    let ground = ground_points(frame, merged, &fp, rules.ground_band);
    if ground.is_empty() {
        return Err(RejectReason::NoGround);
    }
    let mut road: Vec<f64> =
        ground.iter().filter(|&&i| merged[i] == Some(rules.support)).map(|&i| frame.points[i].z as f64).collect();
    if road.is_empty() {
        return Err(RejectReason::NotRoad);
    }
    road.sort_by(f64::total_cmp);
    let n = road.len();
    let median = if n % 2 == 1 { road[n / 2] } else { 0.5 * (road[n / 2 - 1] + road[n / 2]) };
    Ok(median - instance.min_z())
}

/// Road support under the posed footprint and free space inside the posed
/// cylinder. `merged` holds the frame's labels merged through the table the
/// rules were resolved against.
pub fn check_placement(
    frame: &PointFrame,
    merged: &[MergedLabel],
    instance: &Instance,
    pose: &PlacementPose,
    rules: &PlacementRules,
) -> Placement {
    assert_eq!(frame.len(), merged.len(), "one label per point");
    let posed = instance.posed(pose);
    let fp = Footprint::of(&posed, rules.margin);
    let ground = ground_points(frame, merged, &fp, rules.ground_band);
    if ground.is_empty() {
        return Placement::Rejected(RejectReason::NoGround);
    }
    let road = ground.iter().filter(|&&i| merged[i] == Some(rules.support)).count();
    if road == 0 || (road as f64) < rules.road_support_fraction * ground.len() as f64 {
        return Placement::Rejected(RejectReason::NotRoad);
    }
    let (lo, hi) = (fp.z_min - rules.margin, fp.z_max + rules.margin);
    let blocked = frame.points.iter().zip(merged).any(|(p, &label)| {
        let z = p.z as f64;
        !rules.is_free(label) && z >= lo && z <= hi && fp.contains_xy(p.x as f64, p.y as f64)
    });
    if blocked {
        return Placement::Rejected(RejectReason::Occupied);
    }
    Placement::Valid
}
