use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{AugmentConfig, AugmentError, BillboardMask, Instance, PlacementPose};
use crate::io::{LabelFrame, Point, PointFrame};

/// Points are replaced only when they lie this far behind the billboard.
const OCCLUSION_EPS: f64 = 1e-4;

/// Where one transplanted instance came from and which points it replaced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_frame_id: String,
    pub source_instance_id: u16,
    pub class: String,
    pub pose: PlacementPose,
    pub label: u16,
    pub instance_id: u16,
    /// Half-open index ranges `[start, end)` of replaced points.
    pub replaced: Vec<(u32, u32)>,
    pub replaced_count: usize,
}

impl Provenance {
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.replaced.iter().flat_map(|&(a, b)| a as usize..b as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedFrame {
    pub frame: PointFrame,
    pub labels: LabelFrame,
    pub provenance: Vec<Provenance>,
}

pub(crate) fn to_ranges(indices: &[u32]) -> Vec<(u32, u32)> {
    let mut out: Vec<(u32, u32)> = Vec::new();
    for &i in indices {
        match out.last_mut() {
            Some(last) if last.1 == i => last.1 = i + 1,
            _ => out.push((i, i + 1)),
        }
    }
    out
}

/// Replacement points for every frame point hidden behind `mask`.
fn occluded(frame: &PointFrame, mask: &BillboardMask, k: usize) -> Vec<(u32, Point)> {
    frame
        .points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let xyz = Vector3::from(p.xyz());
            let range = xyz.norm();
            let (depth, intensity) = mask.occluder(xyz, k)?;
            (range > depth + OCCLUSION_EPS).then(|| {
                let q = xyz * (depth / range);
                (i as u32, Point::new(q.x as f32, q.y as f32, q.z as f32, intensity))
            })
        })
        .collect()
}

/// Moves every point hidden behind the posed instance's billboard onto the
/// instance along its own beam and relabels it `label` / `instance_id`.
///
/// `pose` must already have passed placement; the frame is edited in place
/// and left untouched on error.
pub(crate) fn transplant_in_place(
    frame: &mut PointFrame,
    labels: &mut LabelFrame,
    instance: &Instance,
    pose: &PlacementPose,
    config: &AugmentConfig,
    label: u16,
    instance_id: u16,
) -> Result<Provenance, AugmentError> {
    let posed = instance.posed(pose);
    let mask = BillboardMask::build(&posed, config.cell_size)?;
    let hits = occluded(frame, &mask, config.idw_neighbors);
    if hits.is_empty() {
        return Err(AugmentError::NoOcclusion);
    }
    for &(i, p) in &hits {
        frame.points[i as usize] = p;
        labels.labels[i as usize] = label;
        labels.instance_ids[i as usize] = instance_id;
    }
    let indices: Vec<u32> = hits.iter().map(|h| h.0).collect();
    Ok(Provenance {
        source_frame_id: instance.source_frame_id.clone(),
        source_instance_id: instance.instance_id,
        class: instance.class_name.clone(),
        pose: *pose,
        label,
        instance_id,
        replaced: to_ranges(&indices),
        replaced_count: indices.len(),
    })
}

/// Copy of the frame with `instance` transplanted at `pose`. The new points
/// get raw label `label` and a fresh instance id.
pub fn transplant_instance(
    frame: &PointFrame,
    labels: &LabelFrame,
    instance: &Instance,
    pose: &PlacementPose,
    config: &AugmentConfig,
    label: u16,
) -> Result<AugmentedFrame, AugmentError> {
    let mut out = AugmentedFrame { frame: frame.clone(), labels: labels.clone(), provenance: Vec::new() };
    let fresh = labels.instance_ids.iter().copied().max().unwrap_or(0).saturating_add(1);
    let prov = transplant_in_place(&mut out.frame, &mut out.labels, instance, pose, config, label, fresh)?;
    out.provenance.push(prov);
    Ok(out)
}
