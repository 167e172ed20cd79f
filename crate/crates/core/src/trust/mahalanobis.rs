//! Class-conditional Gaussian model with a tied covariance in feature space.
//!
//! Model file layout (little-endian):
//!
//! ```text
//! "LEVM" | version u16 | pad u16 | C u32 | D u32 | shrinkage f64 | tau f64
//! | C × u32 class ids | C × D f64 means | D × D f64 lower Cholesky factor of Σ (row-major)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};

use super::TrustError;
use crate::io::PredictionSet;
use crate::taxonomy::{ClassId, ClassTable};

const MODEL_MAGIC: &[u8; 4] = b"LEVM";
const MODEL_VERSION: u16 = 1;
/// Relative diagonal loading, scaled by the mean variance `trace(Σ)/D`.
pub const DEFAULT_SHRINKAGE: f64 = 1e-6;

/// Streaming per-class mean and co-moment accumulator (Welford).
#[derive(Clone, Debug)]
pub struct MahalanobisFitter {
    dim: usize,
    counts: Vec<u64>,
    means: Vec<DVector<f64>>,
    comoments: Vec<DMatrix<f64>>,
}

impl MahalanobisFitter {
    pub fn new(classes: usize, dim: usize) -> Self {
        Self {
            dim,
            counts: vec![0; classes],
            means: vec![DVector::zeros(dim); classes],
            comoments: vec![DMatrix::zeros(dim, dim); classes],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn add(&mut self, class: ClassId, feature: &[f64]) {
        assert_eq!(feature.len(), self.dim, "feature width");
        let c = class.index();
        self.counts[c] += 1;
        let n = self.counts[c] as f64;
        let x = DVector::from_column_slice(feature);
        let delta = &x - &self.means[c];
        self.means[c] += &delta / n;
        let delta2 = &x - &self.means[c];
        self.comoments[c].ger(1.0, &delta, &delta2, 1.0);
    }

    /// Combines two accumulators over disjoint samples.
    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.dim, other.dim);
        for c in 0..self.counts.len() {
            let (na, nb) = (self.counts[c] as f64, other.counts[c] as f64);
            if nb == 0.0 {
                continue;
            }
            let n = na + nb;
            let delta = &other.means[c] - &self.means[c];
            self.comoments[c] += &other.comoments[c];
            self.comoments[c].ger(na * nb / n, &delta, &delta, 1.0);
            self.means[c] += &delta * (nb / n);
            self.counts[c] += other.counts[c];
        }
    }

    /// Pooled within-class covariance over every class with at least D+1
    /// samples, plus `shrinkage · trace/D` on the diagonal.
    pub fn finish(self, shrinkage: f64) -> Result<MahalanobisModel, TrustError> {
        let d = self.dim;
        let mut classes = Vec::new();
        let mut means = Vec::new();
        let mut scatter = DMatrix::zeros(d, d);
        let mut total = 0u64;
        for (c, &n) in self.counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            if (n as usize) < d + 1 {
                warn!("class {c}: {n} samples, need {} for the covariance; excluded", d + 1);
                continue;
            }
            classes.push(ClassId(c as u16));
            means.push(self.means[c].clone());
            scatter += &self.comoments[c];
            total += n;
        }
        if classes.is_empty() {
            return Err(TrustError::InsufficientSamples { needed: d + 1 });
        }
        let mut cov = scatter / total as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        MahalanobisModel::from_parts(classes, means, cov, shrinkage)
    }
}

#[derive(Clone, Debug)]
pub struct MahalanobisModel {
    classes: Vec<ClassId>,
    means: Vec<DVector<f64>>,
    /// Lower Cholesky factor of the shrunk covariance.
    chol_l: DMatrix<f64>,
    /// `L⁻¹`, so that `md = min_c ‖L⁻¹ f − L⁻¹ μ_c‖²`.
    whiten: DMatrix<f64>,
    whitened_means: Vec<DVector<f64>>,
    shrinkage: f64,
    tau: f64,
}

impl MahalanobisModel {
    /// Builds a model from explicit means and covariance. `shrinkage = 0`
    /// uses the covariance as given.
    pub fn from_parts(
        classes: Vec<ClassId>,
        means: Vec<DVector<f64>>,
        cov: DMatrix<f64>,
        shrinkage: f64,
    ) -> Result<Self, TrustError> {
        let d = cov.nrows();
        assert_eq!(cov.ncols(), d, "covariance must be square");
        assert_eq!(classes.len(), means.len());
        for m in &means {
            if m.len() != d {
                return Err(TrustError::DimensionMismatch { found: m.len(), expected: d });
            }
        }
        let mut cov = cov;
        if shrinkage > 0.0 {
            let load = shrinkage * cov.trace() / d as f64;
            for i in 0..d {
                cov[(i, i)] += load;
            }
        }
        if !cov.iter().all(|v| v.is_finite()) {
            return Err(TrustError::SingularCovariance);
        }
        let chol = cov.cholesky().ok_or(TrustError::SingularCovariance)?;
        Self::from_factor(classes, means, chol.l(), shrinkage, 1.0)
    }

    fn from_factor(
        classes: Vec<ClassId>,
        means: Vec<DVector<f64>>,
        chol_l: DMatrix<f64>,
        shrinkage: f64,
        tau: f64,
    ) -> Result<Self, TrustError> {
        let d = chol_l.nrows();
        if (0..d).any(|i| !(chol_l[(i, i)] > 0.0)) {
            return Err(TrustError::SingularCovariance);
        }
        let whiten = chol_l
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or(TrustError::SingularCovariance)?;
        let whitened_means = means.iter().map(|m| &whiten * m).collect();
        Ok(Self { classes, means, chol_l, whiten, whitened_means, shrinkage, tau })
    }

    pub fn dim(&self) -> usize {
        self.chol_l.nrows()
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol_l * self.chol_l.transpose()
    }

    pub fn shrinkage(&self) -> f64 {
        self.shrinkage
    }

    /// Scale of the trust map `exp(-md/τ)`.
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn set_tau(&mut self, tau: f64) {
        assert!(tau > 0.0 && tau.is_finite(), "tau must be positive");
        self.tau = tau;
    }

    /// Squared Mahalanobis distance to the closest class mean.
    pub fn distance(&self, feature: &[f64]) -> f64 {
        let w = &self.whiten * DVector::from_column_slice(feature);
        self.whitened_means
            .iter()
            .map(|m| (&w - m).norm_squared())
            .fold(f64::INFINITY, f64::min)
    }

    /// Sets τ to the median distance over the given calibration features.
    pub fn calibrate_tau<'f>(&mut self, features: impl IntoIterator<Item = &'f [f64]>) {
        let mut d: Vec<f64> = features.into_iter().map(|f| self.distance(f)).collect();
        if d.is_empty() {
            return;
        }
        d.sort_unstable_by(f64::total_cmp);
        let mid = d.len() / 2;
        let median = if d.len() % 2 == 1 { d[mid] } else { 0.5 * (d[mid - 1] + d[mid]) };
        // a degenerate median keeps the previous scale
        if median > 0.0 && median.is_finite() {
            self.tau = median;
        }
    }

    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        let (c, d) = (self.classes.len(), self.dim());
        let mut b = Vec::with_capacity(32 + 4 * c + 8 * (c * d + d * d));
        b.extend_from_slice(MODEL_MAGIC);
        b.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        b.extend_from_slice(&0u16.to_le_bytes());
        b.extend_from_slice(&(c as u32).to_le_bytes());
        b.extend_from_slice(&(d as u32).to_le_bytes());
        b.extend_from_slice(&self.shrinkage.to_le_bytes());
        b.extend_from_slice(&self.tau.to_le_bytes());
        for id in &self.classes {
            b.extend_from_slice(&(id.0 as u32).to_le_bytes());
        }
        for m in &self.means {
            m.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
        }
        for i in 0..d {
            for j in 0..d {
                b.extend_from_slice(&self.chol_l[(i, j)].to_le_bytes());
            }
        }
        out.write_all(&b)
    }

    pub fn read_from(mut input: impl Read) -> Result<Self, TrustError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let bad = |what: &str| TrustError::ModelFile(what.to_string());
        if bytes.len() < 32 || &bytes[0..4] != MODEL_MAGIC {
            return Err(bad("bad magic"));
        }
        if u16::from_le_bytes([bytes[4], bytes[5]]) != MODEL_VERSION {
            return Err(bad("unsupported version"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let (c, d) = (u32_at(8), u32_at(12));
        let expected = 32 + 4 * c + 8 * (c * d + d * d);
        if bytes.len() != expected || d == 0 {
            return Err(bad("length disagrees with header"));
        }
        let shrinkage = f64_at(16);
        let tau = f64_at(24);
        let mut off = 32;
        let classes = (0..c)
            .map(|k| ClassId(u32_at(off + 4 * k) as u16))
            .collect();
        off += 4 * c;
        let means = (0..c)
            .map(|k| DVector::from_fn(d, |i, _| f64_at(off + 8 * (k * d + i))))
            .collect();
        off += 8 * c * d;
        let chol_l = DMatrix::from_fn(d, d, |i, j| f64_at(off + 8 * (i * d + j)));
        if !(tau > 0.0) {
            return Err(bad("non-positive tau"));
        }
        Self::from_factor(classes, means, chol_l, shrinkage, tau)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrustError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrustError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Fits class means and a tied covariance on the in-distribution points of
/// the given training sets, then calibrates τ on the same points.
pub fn fit_mahalanobis(sets: &[&PredictionSet], table: &ClassTable) -> Result<MahalanobisModel, TrustError> {
    let dim = sets.first().map_or(0, |s| s.feature_dim());
    if dim == 0 {
        return Err(TrustError::FeaturesAbsent);
    }
    let mut fitter = MahalanobisFitter::new(table.num_id_classes(), dim);
    let training_rows = || {
        sets.iter().flat_map(|s| {
            (0..s.len()).filter_map(move |i| {
                let gt = s.gt(i)?;
                (gt.index() < table.num_id_classes()).then(|| (gt, widen(s.feature(i).unwrap())))
            })
        })
    };
    for s in sets {
        if s.feature_dim() != dim {
            return Err(TrustError::DimensionMismatch { found: s.feature_dim(), expected: dim });
        }
    }
    for (gt, f) in training_rows() {
        fitter.add(gt, &f);
    }
    let mut model = fitter.finish(DEFAULT_SHRINKAGE)?;
    let rows: Vec<Vec<f64>> = training_rows().map(|(_, f)| f).collect();
    model.calibrate_tau(rows.iter().map(Vec::as_slice));
    Ok(model)
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}
