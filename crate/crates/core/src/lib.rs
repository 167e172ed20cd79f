//! LiDAR OOD dataset augmentation and class-imbalance-aware evaluation of
//! semantic segmentation outputs.
//!
//! - [`taxonomy`]: class tables, label merging, effective-number weights.
//! - [`io`]: point/label files, the `.levk` prediction container, manifests.
//! - [`augment`]: instance bank, billboard masks, placement and transplanting.
//! - [`trust`]: confidence, uncertainty, temperature and Mahalanobis scores.
//! - [`seg_metrics`]: confusion ratios, IoU/Pre/Rec, weighted precision.
//! - [`detect`]: ID/OOD and correct/wrong detection: ROC, AUROC, TSD matrices.

// `!(x > 0.0)` is the NaN-rejecting form used for every range check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod detect;
pub mod io;
pub mod seg_metrics;
pub mod taxonomy;
pub mod trust;

pub use taxonomy::{ClassId, ClassTable, MergedLabel};
