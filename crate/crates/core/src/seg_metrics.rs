//! Segmentation metrics built on the ground-truth-normalized confusion matrix.
//!
//! `p(r, c) = |gt = r ∧ pd = c| / |gt = r|` is the fraction of class-`r`
//! points predicted as `c`. Rows run over every ground-truth class, OOD
//! classes included; columns run over the in-distribution classes only.
//! Weighted precision divides the diagonal by the column sum of `p`, so each
//! ground-truth class contributes by its own error rate rather than by its
//! point count.

use rayon::prelude::*;
use thiserror::Error;

use crate::io::PredictionSet;
use crate::taxonomy::{ClassId, ClassTable, MergedLabel};

/// Probabilities are floored here before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;
/// Largest per-point loss the floor allows, `-ln(LOG_FLOOR)` ≈ 27.63 nats.
pub const MAX_POINT_LOSS: f64 = 27.631_021_115_928_547;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SegError {
    #[error("ground truth has {gt} entries but predictions have {pd}")]
    LengthMismatch { gt: usize, pd: usize },
    #[error("point {index}: class {class} is not a prediction target")]
    InvalidPrediction { index: usize, class: u16 },
    #[error("point {index}: ground-truth class {class} is outside the table")]
    InvalidGroundTruth { index: usize, class: u16 },
    #[error("confusion matrices have different shapes")]
    ShapeMismatch,
}

/// Raw counts `|gt = r ∧ pd = c|`; ratios are derived on demand.
///
/// Counts form a commutative monoid under [`merge`](Self::merge), so
/// per-frame matrices can be reduced in any order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    gt_classes: usize,
    pd_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(gt_classes: usize, pd_classes: usize) -> Self {
        Self { gt_classes, pd_classes, counts: vec![0; gt_classes * pd_classes] }
    }

    pub fn for_table(table: &ClassTable) -> Self {
        Self::new(table.num_classes(), table.num_id_classes())
    }

    pub fn gt_classes(&self) -> usize {
        self.gt_classes
    }

    pub fn pd_classes(&self) -> usize {
        self.pd_classes
    }

    /// Adds one (gt, pd) pair; IGNORE points are skipped.
    pub fn record(&mut self, gt: MergedLabel, pd: ClassId, index: usize) -> Result<(), SegError> {
        let Some(gt) = gt else { return Ok(()) };
        if gt.index() >= self.gt_classes {
            return Err(SegError::InvalidGroundTruth { index, class: gt.0 });
        }
        if pd.index() >= self.pd_classes {
            return Err(SegError::InvalidPrediction { index, class: pd.0 });
        }
        self.counts[gt.index() * self.pd_classes + pd.index()] += 1;
        Ok(())
    }

    pub fn accumulate(&mut self, gt: &[MergedLabel], pd: &[ClassId]) -> Result<(), SegError> {
        if gt.len() != pd.len() {
            return Err(SegError::LengthMismatch { gt: gt.len(), pd: pd.len() });
        }
        for (index, (&g, &p)) in gt.iter().zip(pd).enumerate() {
            self.record(g, p, index)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<(), SegError> {
        if (self.gt_classes, self.pd_classes) != (other.gt_classes, other.pd_classes) {
            return Err(SegError::ShapeMismatch);
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn count(&self, gt: ClassId, pd: ClassId) -> u64 {
        self.counts[gt.index() * self.pd_classes + pd.index()]
    }

    /// `|gt = r|` over non-IGNORE points.
    pub fn gt_total(&self, gt: ClassId) -> u64 {
        let r = gt.index() * self.pd_classes;
        self.counts[r..r + self.pd_classes].iter().sum()
    }

    /// `|pd = c|` across every ground-truth row.
    pub fn pd_total(&self, pd: ClassId) -> u64 {
        (0..self.gt_classes).map(|r| self.counts[r * self.pd_classes + pd.index()]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `p(r, c)`; `None` when class `r` has no ground-truth points.
    pub fn ratio(&self, gt: ClassId, pd: ClassId) -> Option<f64> {
        let total = self.gt_total(gt);
        (total > 0).then(|| self.count(gt, pd) as f64 / total as f64)
    }

    /// Column sum `η_c = Σ_r p(r, c)` over rows that have points.
    pub fn eta(&self, pd: ClassId) -> f64 {
        self.gt_ids().filter_map(|r| self.ratio(r, pd)).sum()
    }

    pub fn gt_ids(&self) -> impl Iterator<Item = ClassId> {
        (0..self.gt_classes as u16).map(ClassId)
    }

    pub fn pd_ids(&self) -> impl Iterator<Item = ClassId> {
        (0..self.pd_classes as u16).map(ClassId)
    }
}

/// Counts every non-IGNORE point of a label/prediction pair.
pub fn confusion_matrix(gt: &[MergedLabel], pd: &[ClassId], table: &ClassTable) -> Result<ConfusionMatrix, SegError> {
    let mut cm = ConfusionMatrix::for_table(table);
    cm.accumulate(gt, pd)?;
    Ok(cm)
}

/// Confusion counts of a prediction set against its own ground truth.
pub fn confusion_from_predictions(preds: &PredictionSet, table: &ClassTable) -> Result<ConfusionMatrix, SegError> {
    let pd: Vec<ClassId> = (0..preds.len()).into_par_iter().map(|i| preds.predicted(i)).collect();
    let gt: Vec<MergedLabel> = (0..preds.len()).map(|i| preds.gt(i)).collect();
    confusion_matrix(&gt, &pd, table)
}

/// Metrics of one predicted class. `None` marks an undefined value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassMetrics {
    pub class: Option<ClassId>,
    pub iou: Option<f64>,
    pub pre: Option<f64>,
    pub rec: Option<f64>,
    pub wpre: Option<f64>,
    pub not_pre: Option<f64>,
    pub not_wpre: Option<f64>,
    pub eta: Option<f64>,
    /// At least one point was predicted as this class.
    pub present: bool,
}

pub fn class_metrics(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    let ratio = |r: ClassId, c: ClassId| cm.ratio(r, c).unwrap_or(0.0);
    cm.pd_ids()
        .map(|c| {
            let tp = cm.count(c, c) as f64;
            let predicted = cm.pd_total(c) as f64;
            let actual = if c.index() < cm.gt_classes() { cm.gt_total(c) as f64 } else { 0.0 };
            let union = actual + predicted - tp;
            let present = predicted > 0.0;
            let eta = cm.eta(c);
            let off_diag: f64 = cm.gt_ids().filter(|&r| r != c).map(|r| ratio(r, c)).sum();
            ClassMetrics {
                class: Some(c),
                iou: (union > 0.0).then(|| tp / union),
                pre: present.then(|| tp / predicted),
                not_pre: present.then(|| (predicted - tp) / predicted),
                rec: (actual > 0.0).then(|| tp / actual),
                eta: present.then_some(eta),
                wpre: (present && eta > 0.0).then(|| ratio(c, c) / eta),
                not_wpre: (present && eta > 0.0).then(|| off_diag / eta),
                present,
            }
        })
        .collect()
}

/// Off-diagonal entries of row `r`: where class-`r` points went wrong.
/// `None` when the row has no points.
pub fn wrong_prediction_ratios(cm: &ConfusionMatrix, gt: ClassId) -> Option<Vec<(ClassId, f64)>> {
    cm.ratio(gt, ClassId(0))?;
    Some(cm.pd_ids().filter(|&c| c != gt).map(|c| (c, cm.ratio(gt, c).unwrap())).collect())
}

/// Off-diagonal entries of column `c`: which other classes end up as `c`.
/// Rows without points are omitted.
pub fn be_confused_ratios(cm: &ConfusionMatrix, pd: ClassId) -> Vec<(ClassId, f64)> {
    cm.gt_ids().filter(|&r| r != pd).filter_map(|r| cm.ratio(r, pd).map(|p| (r, p))).collect()
}

/// Per-class negative log-likelihood of the pass-mean probabilities,
/// accumulated over any number of prediction sets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NllAccumulator {
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl NllAccumulator {
    pub fn new(classes: usize) -> Self {
        Self { sums: vec![0.0; classes], counts: vec![0; classes] }
    }

    /// Adds every point whose ground truth is one of the prediction columns.
    pub fn add(&mut self, preds: &PredictionSet) {
        let c = self.sums.len().min(preds.classes());
        for i in 0..preds.len() {
            let Some(gt) = preds.gt(i) else { continue };
            if gt.index() >= c {
                continue;
            }
            let p = preds.mean_probs(i)[gt.index()];
            self.sums[gt.index()] -= p.max(LOG_FLOOR).ln();
            self.counts[gt.index()] += 1;
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.sums.iter_mut().zip(&other.sums).for_each(|(a, b)| *a += b);
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    /// `L(c)`, absent for classes without ground-truth points.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        self.sums
            .iter()
            .zip(&self.counts)
            .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
            .collect()
    }

    /// `-(1/N) Σ_c w_c Σ_{y_i = c} ln p̄_{i,c}`; absent on an empty set.
    pub fn weighted(&self, weights: &[f64]) -> Option<f64> {
        assert!(weights.len() >= self.sums.len(), "one weight per class");
        let n: u64 = self.counts.iter().sum();
        (n > 0).then(|| self.sums.iter().zip(weights).map(|(s, w)| w * s).sum::<f64>() / n as f64)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
}

pub fn per_class_nll(preds: &PredictionSet) -> Vec<Option<f64>> {
    let mut acc = NllAccumulator::new(preds.classes());
    acc.add(preds);
    acc.per_class()
}

pub fn weighted_ce(preds: &PredictionSet, weights: &[f64]) -> Option<f64> {
    let mut acc = NllAccumulator::new(preds.classes());
    acc.add(preds);
    acc.weighted(weights)
}
