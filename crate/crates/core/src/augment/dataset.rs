use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::placement::{check_placement, ground_shift, Placement, PlacementRules, RejectReason};
use super::transplant::{transplant_in_place, AugmentedFrame};
use super::{merge_frame_labels, AugmentConfig, AugmentError, InstanceBank, PlacementPose};
use crate::io::{
    read_label_frame, read_point_frame, write_augmented_frame, IoError, LabelFrame, Manifest, ManifestEntry,
    PointFrame,
};
use crate::taxonomy::{ClassId, ClassTable};

/// Transplant `per_frame` instances of `class` into every frame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRequest {
    pub class: String,
    pub per_frame: usize,
}

impl ClassRequest {
    pub fn new(class: impl Into<String>, per_frame: usize) -> Self {
        Self { class: class.into(), per_frame }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameOutcome {
    pub frame_id: String,
    pub requested: usize,
    pub placed: usize,
    /// Requested instances that found no valid pose.
    pub exhausted: usize,
    pub rejections: BTreeMap<RejectReason, usize>,
    pub no_occlusion: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentSummary {
    pub manifest: Manifest,
    pub outcomes: Vec<FrameOutcome>,
}

impl AugmentSummary {
    pub fn placed(&self) -> usize {
        self.outcomes.iter().map(|o| o.placed).sum()
    }

    pub fn exhausted_frames(&self) -> usize {
        self.outcomes.iter().filter(|o| o.exhausted > 0).count()
    }
}

/// Per-frame RNG keyed by `sha256(seed ‖ frame_id)`, independent of the order
/// frames are processed in.
pub fn frame_rng(seed: u64, frame_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(frame_id.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

struct Target<'a> {
    class: ClassId,
    label: u16,
    request: &'a ClassRequest,
}

fn resolve_targets<'a>(
    requests: &'a [ClassRequest],
    bank: &InstanceBank,
    table: &ClassTable,
) -> Result<Vec<Target<'a>>, AugmentError> {
    requests
        .iter()
        .map(|r| {
            let class = table.class_by_name(&r.class).ok_or_else(|| AugmentError::UnknownClass(r.class.clone()))?;
            let label = table.canonical_raw(class).ok_or_else(|| AugmentError::UnknownClass(r.class.clone()))?;
            if r.per_frame > 0 && bank.class(&r.class).is_empty() {
                return Err(AugmentError::EmptyBank(r.class.clone()));
            }
            Ok(Target { class, label, request: r })
        })
        .collect()
}

/// Transplants the requested instances into one frame. Instances are drawn
/// uniformly from the bank; each gets up to `max_pose_trials` poses.
pub fn augment_frame(
    frame: &PointFrame,
    labels: &LabelFrame,
    bank: &InstanceBank,
    requests: &[ClassRequest],
    table: &ClassTable,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(AugmentedFrame, FrameOutcome), AugmentError> {
    config.validate()?;
    if frame.len() != labels.len() {
        return Err(IoError::LengthMismatch { found: labels.len(), expected: frame.len() }.into());
    }
    let rules = PlacementRules::resolve(table, config)?;
    let targets = resolve_targets(requests, bank, table)?;
    let mut merged = merge_frame_labels(labels, table, &frame.frame_id)?;
    let mut out = AugmentedFrame { frame: frame.clone(), labels: labels.clone(), provenance: Vec::new() };
    let mut outcome = FrameOutcome { frame_id: frame.frame_id.clone(), ..Default::default() };
    let mut next_id = labels.instance_ids.iter().copied().max().unwrap_or(0);

    for target in &targets {
        let pool = bank.class(&target.request.class);
        for _ in 0..target.request.per_frame {
            outcome.requested += 1;
            let instance = &pool[rng.random_range(0..pool.len())];
            let trials = if config.keep_azimuth { 1 } else { config.max_pose_trials };
            let mut placed = false;
            for _ in 0..trials {
                let theta = if config.keep_azimuth { 0.0 } else { rng.random_range(-PI..PI) };
                let rotated = instance.posed(&PlacementPose::new(theta, 0.0));
                let dz = match ground_shift(&out.frame, &merged, &rotated, &rules) {
                    Ok(dz) => dz,
                    Err(r) => {
                        *outcome.rejections.entry(r).or_default() += 1;
                        continue;
                    }
                };
                let pose = PlacementPose::new(theta, dz);
                if let Placement::Rejected(r) = check_placement(&out.frame, &merged, instance, &pose, &rules) {
                    *outcome.rejections.entry(r).or_default() += 1;
                    continue;
                }
                let id = next_id.saturating_add(1);
                match transplant_in_place(&mut out.frame, &mut out.labels, instance, &pose, config, target.label, id) {
                    Ok(prov) => {
                        for i in prov.indices() {
                            merged[i] = Some(target.class);
                        }
                        out.provenance.push(prov);
                        next_id = id;
                        placed = true;
                        break;
                    }
                    Err(AugmentError::NoOcclusion | AugmentError::DegenerateInstance { .. }) => outcome.no_occlusion += 1,
                    Err(e) => return Err(e),
                }
            }
            if placed {
                outcome.placed += 1;
            } else {
                outcome.exhausted += 1;
            }
        }
    }
    if outcome.exhausted > 0 {
        log::warn!(
            "frame {}: {} of {} instances found no valid pose",
            frame.frame_id,
            outcome.exhausted,
            outcome.requested
        );
    }
    Ok((out, outcome))
}

#[derive(Serialize)]
struct Sidecar<'a> {
    frame_id: &'a str,
    seed: u64,
    outcome: &'a FrameOutcome,
    instances: &'a [super::Provenance],
}

fn sidecar_path(out_dir: &Path, frame_id: &str) -> PathBuf {
    out_dir.join("provenance").join(format!("{frame_id}.json"))
}

/// Augments every frame of `source` and writes `velodyne/`, `labels/`,
/// `provenance/` and `manifest.csv` under `out_dir`. Frames run in parallel;
/// output is identical for a fixed seed regardless of scheduling.
pub fn augment_dataset(
    source: &Manifest,
    bank: &InstanceBank,
    requests: &[ClassRequest],
    table: &ClassTable,
    config: &AugmentConfig,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<AugmentSummary, AugmentError> {
    let out_dir = out_dir.as_ref();
    config.validate()?;
    resolve_targets(requests, bank, table)?;

    let results: Vec<(ManifestEntry, FrameOutcome)> = source
        .entries
        .par_iter()
        .map(|e| {
            let (Some(points), Some(labels)) = (&e.points, &e.labels) else {
                return Err(AugmentError::MissingLabels(e.frame_id.clone()));
            };
            let mut frame = read_point_frame(points)?;
            frame.frame_id = e.frame_id.clone();
            let labels = read_label_frame(labels, frame.len())?;
            let mut rng = frame_rng(seed, &e.frame_id);
            let (aug, outcome) = augment_frame(&frame, &labels, bank, requests, table, config, &mut rng)?;
            let (bin, label) = write_augmented_frame(&aug.frame, &aug.labels, out_dir)?;

            let side = sidecar_path(out_dir, &e.frame_id);
            let text = serde_json::to_string_pretty(&Sidecar {
                frame_id: &e.frame_id,
                seed,
                outcome: &outcome,
                instances: &aug.provenance,
            })
            .expect("provenance serializes");
            if let Some(dir) = side.parent() {
                fs::create_dir_all(dir).map_err(|err| IoError::io(dir, err))?;
            }
            fs::write(&side, text + "\n").map_err(|err| IoError::io(&side, err))?;
            let entry = ManifestEntry { frame_id: e.frame_id.clone(), points: Some(bin), labels: Some(label), predictions: None };
            Ok((entry, outcome))
        })
        .collect::<Result<_, AugmentError>>()?;

    let (entries, outcomes): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let manifest = Manifest { entries };
    manifest.save(out_dir.join("manifest.csv"))?;
    Ok(AugmentSummary { manifest, outcomes })
}
