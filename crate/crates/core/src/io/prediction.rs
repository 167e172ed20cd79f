//! The `.levk` prediction container.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "LEVK"
//!      4     2  version (u16, currently 1)
//!      6     2  flags (u16): bit0 logits present, bit1 features present
//!      8     8  N points (u64)
//!     16     2  M passes (u16)
//!     18     2  C classes (u16)
//!     20     2  D feature width (u16)
//!     22     2  padding, zero
//!     24     …  per point: gt u32 | M×C f32 probs | [M×C f32 logits] | [D f32 feature]
//! ```
//!
//! Every field is little-endian. `gt` is a merged class id, or `u32::MAX` for
//! IGNORE. Probability vectors are renormalized on load when their sum is off
//! by at most 1e-2; anything further off is rejected.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;

use super::IoError;
use crate::taxonomy::{ClassId, MergedLabel};

pub const MAGIC: &[u8; 4] = b"LEVK";
pub const VERSION: u16 = 1;
pub const FLAG_LOGITS: u16 = 1;
pub const FLAG_FEATURES: u16 = 2;
pub const HEADER_LEN: usize = 24;
/// `gt` value marking an IGNORE point.
pub const IGNORE_GT: u32 = u32::MAX;

/// Sums this close to 1 are left untouched (f32 rounding of normalized input).
const EXACT_TOL: f64 = 1e-6;
/// Sums within this band are renormalized without comment.
const SILENT_TOL: f64 = 1e-4;
/// Sums further off than this are a producer error.
const REJECT_TOL: f64 = 1e-2;

/// Per-point model outputs: ground truth, M probability passes over C
/// classes, optional logits and an optional feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    passes: usize,
    classes: usize,
    feature_dim: usize,
    gt: Vec<u32>,
    probs: Vec<f32>,
    logits: Option<Vec<f32>>,
    features: Option<Vec<f32>>,
}

impl PredictionSet {
    /// Empty set; `feature_dim > 0` means rows carry features.
    pub fn new(passes: usize, classes: usize, feature_dim: usize, with_logits: bool) -> Self {
        assert!(passes >= 1 && passes <= u16::MAX as usize, "passes out of range");
        assert!(classes >= 2 && classes <= u16::MAX as usize, "classes out of range");
        assert!(feature_dim <= u16::MAX as usize, "feature width out of range");
        Self {
            passes,
            classes,
            feature_dim,
            gt: Vec::new(),
            probs: Vec::new(),
            logits: with_logits.then(Vec::new),
            features: (feature_dim > 0).then(Vec::new),
        }
    }

    /// Appends one point. Panics when slice widths disagree with the set.
    pub fn push(&mut self, gt: MergedLabel, probs: &[f32], logits: Option<&[f32]>, feature: Option<&[f32]>) {
        let width = self.passes * self.classes;
        assert_eq!(probs.len(), width, "probability row width");
        self.gt.push(gt.map_or(IGNORE_GT, |c| c.0 as u32));
        self.probs.extend_from_slice(probs);
        match (&mut self.logits, logits) {
            (Some(store), Some(l)) => {
                assert_eq!(l.len(), width, "logit row width");
                store.extend_from_slice(l);
            }
            (None, None) => {}
            _ => panic!("logits presence differs from the set"),
        }
        match (&mut self.features, feature) {
            (Some(store), Some(f)) => {
                assert_eq!(f.len(), self.feature_dim, "feature width");
                store.extend_from_slice(f);
            }
            (None, None) => {}
            _ => panic!("feature presence differs from the set"),
        }
    }

    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }

    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn has_logits(&self) -> bool {
        self.logits.is_some()
    }

    pub fn has_features(&self) -> bool {
        self.features.is_some()
    }

    pub fn gt_raw(&self, i: usize) -> u32 {
        self.gt[i]
    }

    pub fn gt(&self, i: usize) -> MergedLabel {
        match self.gt[i] {
            IGNORE_GT => None,
            g => Some(ClassId(g as u16)),
        }
    }

    /// All M passes of point `i`, pass-major (`M × C`).
    pub fn probs(&self, i: usize) -> &[f32] {
        let w = self.passes * self.classes;
        &self.probs[i * w..(i + 1) * w]
    }

    pub fn logits(&self, i: usize) -> Option<&[f32]> {
        let w = self.passes * self.classes;
        self.logits.as_ref().map(|l| &l[i * w..(i + 1) * w])
    }

    pub fn feature(&self, i: usize) -> Option<&[f32]> {
        let d = self.feature_dim;
        self.features.as_ref().map(|f| &f[i * d..(i + 1) * d])
    }

    /// Pass-mean probability vector of point `i`.
    pub fn mean_probs(&self, i: usize) -> Vec<f64> {
        mean_over_passes(self.probs(i), self.passes, self.classes)
    }

    /// Argmax of the pass-mean probability vector; ties go to the lower id.
    pub fn predicted(&self, i: usize) -> ClassId {
        ClassId(argmax(&self.mean_probs(i)) as u16)
    }

    fn flags(&self) -> u16 {
        let mut flags = 0;
        if self.logits.is_some() {
            flags |= FLAG_LOGITS;
        }
        if self.features.is_some() {
            flags |= FLAG_FEATURES;
        }
        flags
    }

    fn row_bytes(&self) -> usize {
        let w = self.passes * self.classes;
        4 + 4 * w + if self.logits.is_some() { 4 * w } else { 0 } + 4 * self.feature_dim
    }

    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        let mut header = Vec::with_capacity(HEADER_LEN);
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        header.extend_from_slice(&self.flags().to_le_bytes());
        header.extend_from_slice(&(self.len() as u64).to_le_bytes());
        header.extend_from_slice(&(self.passes as u16).to_le_bytes());
        header.extend_from_slice(&(self.classes as u16).to_le_bytes());
        header.extend_from_slice(&(self.feature_dim as u16).to_le_bytes());
        header.extend_from_slice(&0u16.to_le_bytes());
        out.write_all(&header)?;

        let mut row = Vec::with_capacity(self.row_bytes());
        for i in 0..self.len() {
            row.clear();
            row.extend_from_slice(&self.gt[i].to_le_bytes());
            let put = |row: &mut Vec<u8>, vals: &[f32]| vals.iter().for_each(|v| row.extend_from_slice(&v.to_le_bytes()));
            put(&mut row, self.probs(i));
            if let Some(l) = self.logits(i) {
                put(&mut row, l);
            }
            if let Some(f) = self.feature(i) {
                put(&mut row, f);
            }
            out.write_all(&row)?;
        }
        Ok(())
    }

    /// Parses a complete `.levk` byte stream of known total length.
    pub fn read_from(mut input: impl Read, total_len: u64) -> Result<Self, IoError> {
        let io = |e| IoError::io("<prediction stream>", e);
        let mut header = [0u8; HEADER_LEN];
        if total_len < HEADER_LEN as u64 {
            return Err(if total_len >= 4 { IoError::HeaderInconsistent("short header".into()) } else { IoError::BadMagic });
        }
        input.read_exact(&mut header).map_err(io)?;
        if &header[0..4] != MAGIC {
            return Err(IoError::BadMagic);
        }
        let u16_at = |o: usize| u16::from_le_bytes([header[o], header[o + 1]]);
        let version = u16_at(4);
        let flags = u16_at(6);
        let n = u64::from_le_bytes(header[8..16].try_into().unwrap());
        let (m, c, d) = (u16_at(16) as usize, u16_at(18) as usize, u16_at(20) as usize);
        if version != VERSION {
            return Err(IoError::HeaderInconsistent(format!("unsupported version {version}")));
        }
        if flags & !(FLAG_LOGITS | FLAG_FEATURES) != 0 {
            return Err(IoError::HeaderInconsistent(format!("unknown flag bits {flags:#x}")));
        }
        if m < 1 || c < 2 {
            return Err(IoError::HeaderInconsistent(format!("M={m}, C={c}")));
        }
        if (flags & FLAG_FEATURES != 0) != (d > 0) {
            return Err(IoError::HeaderInconsistent(format!("feature flag disagrees with D={d}")));
        }

        let mut set = PredictionSet::new(m, c, d, flags & FLAG_LOGITS != 0);
        let row_bytes = set.row_bytes() as u64;
        let expected = n.checked_mul(row_bytes).and_then(|p| p.checked_add(HEADER_LEN as u64));
        if expected != Some(total_len) {
            return Err(IoError::HeaderInconsistent(format!(
                "header declares {n} points of {row_bytes} bytes but the file holds {total_len} bytes"
            )));
        }

        let n = n as usize;
        let w = m * c;
        set.gt.reserve_exact(n);
        set.probs.reserve_exact(n * w);
        let mut row = vec![0u8; row_bytes as usize];
        let mut floats = Vec::with_capacity(w);
        for index in 0..n {
            input.read_exact(&mut row).map_err(io)?;
            set.gt.push(u32::from_le_bytes(row[0..4].try_into().unwrap()));
            let mut off = 4;
            let mut take = |k: usize, out: &mut Vec<f32>| {
                out.clear();
                out.extend(row[off..off + 4 * k].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())));
                off += 4 * k;
            };
            take(w, &mut floats);
            for pass in floats.chunks_exact_mut(c) {
                normalize_row(pass, index)?;
            }
            set.probs.extend_from_slice(&floats);
            if let Some(l) = set.logits.as_mut() {
                take(w, &mut floats);
                l.extend_from_slice(&floats);
            }
            if let Some(f) = set.features.as_mut() {
                take(d, &mut floats);
                f.extend_from_slice(&floats);
            }
        }
        Ok(set)
    }
}

/// Validates one probability vector and rescales it to sum to one.
fn normalize_row(p: &mut [f32], index: usize) -> Result<(), IoError> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(IoError::ProbabilityNotNormalized { index });
    }
    let sum: f64 = p.iter().map(|&v| v as f64).sum();
    let off = (sum - 1.0).abs();
    if off > REJECT_TOL {
        return Err(IoError::ProbabilityNotNormalized { index });
    }
    if off > EXACT_TOL {
        if off > SILENT_TOL {
            warn!("point {index}: probability sum {sum:.6}, renormalizing");
        }
        p.iter_mut().for_each(|v| *v = (*v as f64 / sum) as f32);
    }
    Ok(())
}

pub(crate) fn mean_over_passes(rows: &[f32], passes: usize, classes: usize) -> Vec<f64> {
    let mut mean = vec![0.0; classes];
    for pass in rows.chunks_exact(classes) {
        for (m, &v) in mean.iter_mut().zip(pass) {
            *m += v as f64;
        }
    }
    let inv = 1.0 / passes as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    mean
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn write_prediction_set(set: &PredictionSet, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| IoError::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    set.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| IoError::io(path, e))
}

pub fn read_prediction_set(path: impl AsRef<Path>) -> Result<PredictionSet, IoError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| IoError::io(path, e))?;
    let len = file.metadata().map_err(|e| IoError::io(path, e))?.len();
    PredictionSet::read_from(BufReader::new(file), len)
}

/// Imports a small prediction set from CSV.
///
/// The header names the columns: `gt`, then `p<m>_<c>` for every pass `m`
/// and class `c`, optionally `l<m>_<c>` logits and `f<k>` feature entries.
/// An empty `gt` cell or `ignore` marks an IGNORE point.
pub fn read_prediction_csv(path: impl AsRef<Path>) -> Result<PredictionSet, IoError> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();

    let mut gt_col = None;
    let mut prob_cols = Vec::new();
    let mut logit_cols = Vec::new();
    let mut feat_cols = Vec::new();
    for (col, name) in headers.iter().enumerate() {
        let name = name.trim();
        let pass_class = |s: &str| -> Option<(usize, usize)> {
            let (a, b) = s.split_once('_')?;
            Some((a.parse().ok()?, b.parse().ok()?))
        };
        if name == "gt" {
            gt_col = Some(col);
        } else if let Some(mc) = name.strip_prefix('p').and_then(pass_class) {
            prob_cols.push((mc, col));
        } else if let Some(mc) = name.strip_prefix('l').and_then(pass_class) {
            logit_cols.push((mc, col));
        } else if let Some(k) = name.strip_prefix('f').and_then(|s| s.parse::<usize>().ok()) {
            feat_cols.push((k, col));
        } else {
            return Err(IoError::Csv(format!("unrecognized column {name:?}")));
        }
    }
    let gt_col = gt_col.ok_or_else(|| IoError::Csv("missing gt column".into()))?;
    let (m, c) = grid_shape(&mut prob_cols, "p")?;
    let with_logits = !logit_cols.is_empty();
    if with_logits && grid_shape(&mut logit_cols, "l")? != (m, c) {
        return Err(IoError::Csv("logit columns do not match probability columns".into()));
    }
    feat_cols.sort_unstable();
    if feat_cols.iter().enumerate().any(|(i, &(k, _))| i != k) {
        return Err(IoError::Csv("feature columns must be f0..f<D-1>".into()));
    }

    let mut set = PredictionSet::new(m, c, feat_cols.len(), with_logits);
    let mut probs = Vec::new();
    let mut logits = Vec::new();
    let mut feat = Vec::new();
    for (index, rec) in reader.records().enumerate() {
        let rec = rec?;
        let num = |col: usize| -> Result<f32, IoError> {
            rec[col].trim().parse().map_err(|_| IoError::Csv(format!("row {index}: bad number {:?}", &rec[col])))
        };
        let gt = match rec[gt_col].trim() {
            "" | "ignore" => None,
            s => Some(ClassId(s.parse().map_err(|_| IoError::Csv(format!("row {index}: bad gt {s:?}")))?)),
        };
        probs.clear();
        for &(_, col) in &prob_cols {
            probs.push(num(col)?);
        }
        for pass in probs.chunks_exact_mut(c) {
            normalize_row(pass, index)?;
        }
        logits.clear();
        for &(_, col) in &logit_cols {
            logits.push(num(col)?);
        }
        feat.clear();
        for &(_, col) in &feat_cols {
            feat.push(num(col)?);
        }
        set.push(
            gt,
            &probs,
            with_logits.then_some(logits.as_slice()),
            (!feat.is_empty()).then_some(feat.as_slice()),
        );
    }
    Ok(set)
}

/// Sorts `(pass, class)` columns and checks they form a full M × C grid.
fn grid_shape(cols: &mut [((usize, usize), usize)], prefix: &str) -> Result<(usize, usize), IoError> {
    cols.sort_unstable();
    let m = cols.iter().map(|((p, _), _)| p + 1).max().unwrap_or(0);
    let c = cols.iter().map(|((_, k), _)| k + 1).max().unwrap_or(0);
    let full = m >= 1 && c >= 2 && cols.len() == m * c;
    let dense = cols.iter().enumerate().all(|(i, ((p, k), _))| *p == i / c && *k == i % c);
    if full && dense {
        Ok((m, c))
    } else {
        Err(IoError::Csv(format!("{prefix}<m>_<c> columns do not form a complete grid")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bytes(set: &PredictionSet) -> Vec<u8> {
        let mut v = Vec::new();
        set.write_to(&mut v).unwrap();
        v
    }

    fn read(b: &[u8]) -> Result<PredictionSet, IoError> {
        PredictionSet::read_from(b, b.len() as u64)
    }

    #[test]
    fn single_point_prediction() {
        let mut set = PredictionSet::new(1, 2, 0, false);
        set.push(Some(ClassId(0)), &[0.6, 0.4], None, None);
        let b = bytes(&set);
        assert_eq!(b.len(), HEADER_LEN + 4 + 8);
        let back = read(&b).unwrap();
        assert_eq!(back.predicted(0), ClassId(0));
        assert_eq!(back.gt(0), Some(ClassId(0)));
    }

    #[test]
    fn header_layout_is_fixed() {
        let mut set = PredictionSet::new(2, 3, 4, true);
        let p = [0.2, 0.3, 0.5, 0.1, 0.1, 0.8];
        set.push(None, &p, Some(&[0.0; 6]), Some(&[1.0, 2.0, 3.0, 4.0]));
        let b = bytes(&set);
        assert_eq!(&b[0..4], b"LEVK");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..8], &[3, 0]);
        assert_eq!(&b[8..16], &1u64.to_le_bytes());
        assert_eq!(&b[16..24], &[2, 0, 3, 0, 4, 0, 0, 0]);
        assert_eq!(&b[24..28], &u32::MAX.to_le_bytes());
        assert_eq!(b.len(), 24 + 4 + 4 * (6 + 6 + 4));
        assert_eq!(read(&b).unwrap().gt(0), None);
    }

    #[test]
    fn unnormalized_probabilities_rejected() {
        let mut set = PredictionSet::new(1, 2, 0, false);
        set.push(Some(ClassId(0)), &[0.7, 0.7], None, None);
        assert!(matches!(read(&bytes(&set)), Err(IoError::ProbabilityNotNormalized { index: 0 })));
    }

    #[test]
    fn slight_drift_is_renormalized() {
        let mut set = PredictionSet::new(1, 2, 0, false);
        set.push(Some(ClassId(1)), &[0.3, 0.705], None, None);
        let back = read(&bytes(&set)).unwrap();
        let s: f64 = back.probs(0).iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bad_magic_and_sizes() {
        let mut set = PredictionSet::new(1, 2, 0, false);
        set.push(Some(ClassId(0)), &[0.5, 0.5], None, None);
        let mut b = bytes(&set);
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(read(&bad), Err(IoError::BadMagic)));
        b.push(0);
        assert!(matches!(read(&b), Err(IoError::HeaderInconsistent(_))));
        b.truncate(b.len() - 2);
        assert!(matches!(read(&b), Err(IoError::HeaderInconsistent(_))));
        let mut flagged = bytes(&set);
        flagged[6] = FLAG_FEATURES as u8;
        assert!(matches!(read(&flagged), Err(IoError::HeaderInconsistent(_))));
    }

    #[test]
    fn csv_import() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, "gt,p0_0,p0_1,l0_0,l0_1,f0\n0,0.6,0.4,1.0,0.5,3.5\nignore,0.1,0.9,0,2,1\n").unwrap();
        let set = read_prediction_csv(&path).unwrap();
        assert_eq!((set.len(), set.passes(), set.classes(), set.feature_dim()), (2, 1, 2, 1));
        assert_eq!(set.gt(1), None);
        assert_eq!(set.predicted(1), ClassId(1));
        assert_eq!(set.logits(0).unwrap(), &[1.0, 0.5]);
        assert_eq!(set.feature(0).unwrap(), &[3.5]);

        std::fs::write(&path, "gt,p0_0,p1_1\n0,1,1\n").unwrap();
        assert!(read_prediction_csv(&path).is_err());
    }

    fn arb_set() -> impl Strategy<Value = PredictionSet> {
        (1usize..4, 2usize..6, 0usize..4, any::<bool>(), 0usize..20).prop_flat_map(|(m, c, d, logits, n)| {
            let row = (
                prop::option::weighted(0.9, 0u16..(c as u16 + 2)),
                prop::collection::vec(prop::collection::vec(0.0f64..1.0, c), m),
                prop::collection::vec(-10.0f32..10.0, m * c),
                prop::collection::vec(-100.0f32..100.0, d),
            );
            prop::collection::vec(row, n).prop_map(move |rows| {
                let mut set = PredictionSet::new(m, c, d, logits);
                for (gt, passes, l, f) in rows {
                    let probs: Vec<f32> = passes
                        .iter()
                        .flat_map(|p| {
                            let s: f64 = p.iter().sum::<f64>() + 1e-9;
                            p.iter().map(move |v| ((v + 1e-9 / p.len() as f64) / s) as f32)
                        })
                        .collect();
                    set.push(gt.map(ClassId), &probs, logits.then_some(&l[..]), (d > 0).then_some(&f[..]));
                }
                set
            })
        })
    }

    proptest! {
        #[test]
        fn write_read_is_identity(set in arb_set()) {
            let back = read(&bytes(&set)).unwrap();
            prop_assert_eq!(back, set);
        }
    }
}
