//! Thresholded OOD and misclassification detection per predicted class.
//!
//! Every evaluation looks at the points predicted as one class `c` and splits
//! them by ground truth into a true set `𝒜` and a false set `𝒜̄`:
//!
//! | task     | `𝒜`        | `𝒜̄`                     |
//! |----------|------------|-------------------------|
//! | `Io`     | ID classes | OOD classes             |
//! | `Cw`     | `{c}`      | ID classes except `c`   |
//! | `CwOod`  | `{c}`      | every other class       |
//!
//! A point is accepted when its trust `g` is strictly above the threshold.

mod report;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seg_metrics::ConfusionMatrix;
use crate::taxonomy::ClassId;

pub use report::{
    records_from_scores, write_confusion_csv, write_metrics_csv, ClassTaskResult, Report, ReportOptions,
};

pub const DEFAULT_DELTA: f64 = 0.9;
pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("bin edges must rise strictly from 0 to 1: {0:?}")]
    BadEdges(Vec<f64>),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error(transparent)]
    Records(#[from] crate::seg_metrics::SegError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    Io,
    Cw,
    CwOod,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Io, TaskKind::Cw, TaskKind::CwOod];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Io => "io",
            TaskKind::Cw => "cw",
            TaskKind::CwOod => "cwood",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = DetectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "io" => Ok(TaskKind::Io),
            "cw" => Ok(TaskKind::Cw),
            "cwood" => Ok(TaskKind::CwOod),
            _ => Err(DetectError::UnknownTask(s.to_string())),
        }
    }
}

/// A task resolved for one predicted class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub class: ClassId,
    /// Ground-truth classes `0..id_classes` are in-distribution, the rest OOD.
    pub id_classes: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, class: ClassId, id_classes: usize) -> Self {
        Self { kind, class, id_classes }
    }

    /// `Some(true)` for `𝒜`, `Some(false)` for `𝒜̄`, `None` when the
    /// ground-truth class takes no part in the task.
    pub fn membership(&self, gt: ClassId) -> Option<bool> {
        let ood = gt.index() >= self.id_classes;
        match self.kind {
            TaskKind::Io => Some(!ood),
            TaskKind::Cw if ood => None,
            TaskKind::Cw | TaskKind::CwOod => Some(gt == self.class),
        }
    }
}

/// One scored point: ground truth, prediction and normalized trust.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub gt: ClassId,
    pub pd: ClassId,
    pub trust: f64,
}

/// `z = 1` (accept) iff `g > δ`.
pub fn decide(g: f64, delta: f64) -> bool {
    g > delta
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl DetectionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn merge(&mut self, other: &Self) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn tpr(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn fpr(&self) -> Option<f64> {
        let d = self.fp + self.tn;
        (d > 0).then(|| self.fp as f64 / d as f64)
    }
}

/// Counts over the records predicted as the task's class. Records outside
/// the task (OOD ground truth under `Cw`) are not counted.
pub fn detection_counts(records: &[EvalRecord], task: &TaskSpec, delta: f64) -> DetectionCounts {
    let mut out = DetectionCounts::default();
    for r in records.iter().filter(|r| r.pd == task.class) {
        match (task.membership(r.gt), decide(r.trust, delta)) {
            (Some(true), true) => out.tp += 1,
            (Some(true), false) => out.fn_ += 1,
            (Some(false), true) => out.fp += 1,
            (Some(false), false) => out.tn += 1,
            (None, _) => {}
        }
    }
    out
}

pub fn tpr_fpr(counts: &DetectionCounts) -> (Option<f64>, Option<f64>) {
    (counts.tpr(), counts.fpr())
}

/// ROC curve point at one threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Points with `g ≥ threshold` are accepted; `+∞` for the origin.
    pub threshold: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Roc {
    pub curve: Vec<RocPoint>,
    pub auroc: Option<f64>,
    pub positives: u64,
    pub negatives: u64,
}

/// ROC swept over every distinct trust value, from `(0, 0)` to `(1, 1)`.
///
/// Tied scores move both rates at once, so the trapezoid over the tie
/// credits half of each tied pair and the area equals the Mann-Whitney
/// statistic. The area is accumulated in integers and divided once.
pub fn roc_auroc(records: &[EvalRecord], task: &TaskSpec) -> Roc {
    let mut scored: Vec<(f64, bool)> = records
        .iter()
        .filter(|r| r.pd == task.class)
        .filter_map(|r| task.membership(r.gt).map(|t| (r.trust, t)))
        .collect();
    scored.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
    let pos = scored.iter().filter(|s| s.1).count() as u64;
    let neg = scored.len() as u64 - pos;

    let rate = |k: u64, n: u64| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let mut curve = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area: u128 = 0;
    for group in scored.chunk_by(|a, b| a.0 == b.0) {
        let dtp = group.iter().filter(|s| s.1).count() as u64;
        let dfp = group.len() as u64 - dtp;
        twice_area += dfp as u128 * (2 * tp + dtp) as u128;
        tp += dtp;
        fp += dfp;
        curve.push(RocPoint { fpr: rate(fp, neg), tpr: rate(tp, pos), threshold: group[0].0 });
    }
    let auroc = (pos > 0 && neg > 0).then(|| twice_area as f64 / (2 * pos as u128 * neg as u128) as f64);
    Roc { curve, auroc, positives: pos, negatives: neg }
}

/// `n` equal-width bins on `[0, 1]`.
pub fn uniform_edges(n: usize) -> Vec<f64> {
    assert!(n > 0, "at least one bin");
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

pub fn validate_edges(edges: &[f64]) -> Result<(), DetectError> {
    let ok = edges.len() >= 2
        && edges[0] == 0.0
        && edges[edges.len() - 1] == 1.0
        && edges.windows(2).all(|w| w[0] < w[1]);
    if ok { Ok(()) } else { Err(DetectError::BadEdges(edges.to_vec())) }
}

/// Bin of `g` under left-open intervals `(δᵢ, δᵢ₊₁]`; `g ≤ δ₁` lands in bin 0.
pub fn bin_index(edges: &[f64], g: f64) -> usize {
    let inner = &edges[1..edges.len() - 1];
    inner.partition_point(|&e| e < g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    IdCorrect,
    IdWrong,
    Ood,
}

impl Band {
    pub fn name(self) -> &'static str {
        match self {
            Band::IdCorrect => "id_correct",
            Band::IdWrong => "id_wrong",
            Band::Ood => "ood",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsdRow {
    pub gt: ClassId,
    pub band: Band,
    /// `|gt = r|` over the whole evaluation set.
    pub gt_total: u64,
    pub counts: Vec<u64>,
    pub q: Vec<f64>,
}

impl TsdRow {
    /// `Σᵢ q(r, c, δᵢ)`, which equals `p(r, c)`.
    pub fn marginal(&self) -> f64 {
        self.q.iter().sum()
    }
}

/// Trust-score distribution of one predicted class. Rows come in band order:
/// the class itself, the other ID classes, then OOD classes.
#[derive(Clone, Debug, PartialEq)]
pub struct TsdMatrix {
    pub class: ClassId,
    pub edges: Vec<f64>,
    pub rows: Vec<TsdRow>,
}

impl TsdMatrix {
    pub fn row(&self, gt: ClassId) -> Option<&TsdRow> {
        self.rows.iter().find(|r| r.gt == gt)
    }
}

/// `q(r, c, δᵢ) = |gt = r ∧ pd = c ∧ δᵢ < g ≤ δᵢ₊₁| / |gt = r|`, with
/// `|gt = r|` taken from `cm`. Rows without ground-truth points are all zero.
pub fn tsd_matrix(records: &[EvalRecord], class: ClassId, cm: &ConfusionMatrix, edges: &[f64]) -> Result<TsdMatrix, DetectError> {
    validate_edges(edges)?;
    let bins = edges.len() - 1;
    let mut counts = vec![vec![0u64; bins]; cm.gt_classes()];
    for r in records.iter().filter(|r| r.pd == class && r.gt.index() < cm.gt_classes()) {
        counts[r.gt.index()][bin_index(edges, r.trust)] += 1;
    }
    let band = |gt: ClassId| {
        if gt == class {
            Band::IdCorrect
        } else if gt.index() < cm.pd_classes() {
            Band::IdWrong
        } else {
            Band::Ood
        }
    };
    let mut order: Vec<ClassId> = cm.gt_ids().collect();
    order.sort_by_key(|&g| (band(g), g));
    let rows = order
        .into_iter()
        .map(|gt| {
            let total = cm.gt_total(gt);
            let c = std::mem::take(&mut counts[gt.index()]);
            let q = c.iter().map(|&k| if total == 0 { 0.0 } else { k as f64 / total as f64 }).collect();
            TsdRow { gt, band: band(gt), gt_total: total, counts: c, q }
        })
        .collect();
    Ok(TsdMatrix { class, edges: edges.to_vec(), rows })
}

/// `wTP / (wTP + wFP)` where each accepted point of ground truth `r` counts
/// `1 / |gt = r|`. Absent when nothing is accepted.
pub fn weighted_precision_at(records: &[EvalRecord], task: &TaskSpec, delta: f64, cm: &ConfusionMatrix) -> Option<f64> {
    let mut accepted = vec![0u64; cm.gt_classes()];
    for r in records.iter().filter(|r| r.pd == task.class && decide(r.trust, delta)) {
        if r.gt.index() < accepted.len() {
            accepted[r.gt.index()] += 1;
        }
    }
    let (mut wtp, mut wfp) = (0.0, 0.0);
    for gt in cm.gt_ids() {
        let k = accepted[gt.index()];
        if k == 0 {
            continue;
        }
        let w = k as f64 / cm.gt_total(gt) as f64;
        match task.membership(gt) {
            Some(true) => wtp += w,
            Some(false) => wfp += w,
            None => {}
        }
    }
    (wtp + wfp > 0.0).then(|| wtp / (wtp + wfp))
}
