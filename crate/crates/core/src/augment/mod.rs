//! Copy-paste augmentation of LiDAR frames with instances from another
//! dataset.
//!
//! An instance is posed into a target frame, flattened into a billboard mask
//! facing the sensor, and every target point hidden behind the mask is pulled
//! forward onto the instance along its own beam. Points are only ever moved
//! along their ray, so the target sensor's scan pattern survives.

mod billboard;
mod dataset;
mod placement;
mod transplant;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{read_label_frame, read_point_frame, IoError, LabelFrame, Manifest, Point, PointFrame};
use crate::taxonomy::{ClassId, ClassTable, TaxonomyError};

pub use billboard::{BillboardMask, MaskCell};
pub use dataset::{augment_dataset, augment_frame, frame_rng, AugmentSummary, ClassRequest, FrameOutcome};
pub use placement::{check_placement, ground_shift, Footprint, Placement, PlacementRules, RejectReason};
pub use transplant::{transplant_instance, AugmentedFrame, Provenance};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("instance center is {range:.3} m from the sensor")]
    DegenerateInstance { range: f64 },
    #[error("the billboard hides no frame point")]
    NoOcclusion,
    #[error("instance bank has no {0:?} instances")]
    EmptyBank(String),
    #[error("class {0:?} is not in the class table")]
    UnknownClass(String),
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
    #[error("frame {0:?} has no label file")]
    MissingLabels(String),
    #[error("unmapped raw label {raw} in frame {frame_id:?}")]
    UnmappedLabel { frame_id: String, raw: u16 },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Tunables for bank building, placement and transplanting. Lengths in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub cell_size: f64,
    /// Inflation of the footprint disc and the free-space cylinder.
    pub margin: f64,
    pub road_support_fraction: f64,
    pub min_points: usize,
    pub max_pose_trials: usize,
    /// Points within this height of the lowest point under the footprint
    /// count as ground.
    pub ground_band: f64,
    pub idw_neighbors: usize,
    /// Place instances at their source azimuth (`θ = 0`) instead of sampling.
    pub keep_azimuth: bool,
    /// Class that must support the instance.
    pub support_class: String,
    /// Classes allowed inside the free-space cylinder.
    pub free_classes: Vec<String>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            cell_size: 0.05,
            margin: 0.2,
            road_support_fraction: 0.8,
            min_points: 30,
            max_pose_trials: 16,
            ground_band: 0.3,
            idw_neighbors: 3,
            keep_azimuth: false,
            support_class: "road".into(),
            free_classes: vec!["road".into(), "plants".into()],
        }
    }
}

impl AugmentConfig {
    /// Parses a TOML table; missing keys keep their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self, AugmentError> {
        let config: Self = toml::from_str(text).map_err(|e| AugmentError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, AugmentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: &str| Err(AugmentError::InvalidConfig(m.to_string()));
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return bad("cell_size must be positive");
        }
        if !(self.margin >= 0.0 && self.ground_band >= 0.0) {
            return bad("margin and ground_band must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.road_support_fraction) {
            return bad("road_support_fraction must lie in [0, 1]");
        }
        if self.idw_neighbors == 0 || self.max_pose_trials == 0 {
            return bad("idw_neighbors and max_pose_trials must be positive");
        }
        Ok(())
    }
}

/// Rotation `theta` about the sensor z-axis followed by a vertical shift `dz`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlacementPose {
    pub theta: f64,
    pub dz: f64,
}

impl PlacementPose {
    pub fn new(theta: f64, dz: f64) -> Self {
        Self { theta, dz }
    }

    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.theta.sin_cos();
        Vector3::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z + self.dz)
    }
}

/// One object cut out of an auxiliary frame, in that frame's sensor coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub source_frame_id: String,
    pub instance_id: u16,
    pub class_name: String,
    pub points: Vec<Point>,
    pub center: Vector3<f64>,
    pub center_range: f64,
}

impl Instance {
    pub fn new(source_frame_id: impl Into<String>, instance_id: u16, class_name: impl Into<String>, points: Vec<Point>) -> Self {
        assert!(!points.is_empty(), "an instance needs points");
        let sum = points.iter().fold(Vector3::zeros(), |acc, p| acc + Vector3::from(p.xyz()));
        let center = sum / points.len() as f64;
        Self {
            source_frame_id: source_frame_id.into(),
            instance_id,
            class_name: class_name.into(),
            points,
            center,
            center_range: center.norm(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Copy of the instance with `pose` applied to every point and the center.
    pub fn posed(&self, pose: &PlacementPose) -> Instance {
        let points = self
            .points
            .iter()
            .map(|p| {
                let q = pose.apply(Vector3::from(p.xyz()));
                Point::new(q.x as f32, q.y as f32, q.z as f32, p.intensity)
            })
            .collect();
        let center = pose.apply(self.center);
        Instance { points, center, center_range: center.norm(), ..self.clone() }
    }

    pub fn min_z(&self) -> f64 {
        self.points.iter().map(|p| p.z as f64).fold(f64::INFINITY, f64::min)
    }

    pub fn max_z(&self) -> f64 {
        self.points.iter().map(|p| p.z as f64).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Instances grouped by class name, in deterministic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InstanceBank {
    by_class: BTreeMap<String, Vec<Instance>>,
}

impl InstanceBank {
    pub fn new(instances: impl IntoIterator<Item = Instance>) -> Self {
        let mut by_class: BTreeMap<String, Vec<Instance>> = BTreeMap::new();
        for i in instances {
            by_class.entry(i.class_name.clone()).or_default().push(i);
        }
        Self { by_class }
    }

    pub fn len(&self) -> usize {
        self.by_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class(&self, name: &str) -> &[Instance] {
        self.by_class.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Instance> {
        self.by_class.values().flatten()
    }
}

/// Merged class per point; unmapped raw labels are an error.
pub(crate) fn merge_frame_labels(
    labels: &LabelFrame,
    table: &ClassTable,
    frame_id: &str,
) -> Result<Vec<Option<ClassId>>, AugmentError> {
    labels
        .labels
        .iter()
        .map(|&raw| table.lookup(raw).ok_or_else(|| AugmentError::UnmappedLabel { frame_id: frame_id.to_string(), raw }))
        .collect()
}

/// Instances of the `wanted` classes in one labeled frame: one per
/// (instance id, class) with at least `min_points` points. Instance id 0 means
/// "no instance" and is skipped.
pub fn instances_in_frame(
    frame: &PointFrame,
    labels: &LabelFrame,
    table: &ClassTable,
    wanted: &BTreeSet<ClassId>,
    min_points: usize,
) -> Result<Vec<Instance>, AugmentError> {
    if frame.len() != labels.len() {
        return Err(IoError::LengthMismatch { found: labels.len(), expected: frame.len() }.into());
    }
    let merged = merge_frame_labels(labels, table, &frame.frame_id)?;
    let mut groups: BTreeMap<(u16, ClassId), Vec<Point>> = BTreeMap::new();
    for ((p, &inst), class) in frame.points.iter().zip(&labels.instance_ids).zip(merged) {
        if let Some(c) = class.filter(|c| inst != 0 && wanted.contains(c)) {
            groups.entry((inst, c)).or_default().push(*p);
        }
    }
    Ok(groups
        .into_iter()
        .filter(|(_, pts)| pts.len() >= min_points.max(1))
        .map(|((inst, c), pts)| Instance::new(frame.frame_id.clone(), inst, table.class_name(c), pts))
        .collect())
}

/// Collects instances of the named classes from every labeled frame.
pub fn build_instance_bank(
    manifest: &Manifest,
    table: &ClassTable,
    wanted: &[&str],
    min_points: usize,
) -> Result<InstanceBank, AugmentError> {
    use rayon::prelude::*;
    let wanted: BTreeSet<ClassId> = wanted
        .iter()
        .map(|n| table.class_by_name(n).ok_or_else(|| AugmentError::UnknownClass(n.to_string())))
        .collect::<Result<_, _>>()?;
    let per_frame: Vec<Vec<Instance>> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let (Some(points), Some(labels)) = (&e.points, &e.labels) else {
                return Err(AugmentError::MissingLabels(e.frame_id.clone()));
            };
            let mut frame = read_point_frame(points)?;
            frame.frame_id = e.frame_id.clone();
            let labels = read_label_frame(labels, frame.len())?;
            instances_in_frame(&frame, &labels, table, &wanted, min_points)
        })
        .collect::<Result<_, _>>()?;
    Ok(InstanceBank::new(per_frame.into_iter().flatten()))
}
